"""Simulated targets and the engine that drives them."""

from snapfuzz.guest.engine import (
    DEFAULT_OP_BUDGET,
    BootError,
    Context,
    ExecResult,
    Exit,
    Guest,
    Step,
    Target,
    TargetCrash,
)
from snapfuzz.guest.ftp_like import FtpLike
from snapfuzz.guest.longprefix import LongPrefix
from snapfuzz.guest.platformer import Platformer

TARGETS = {
    "ftp_like": FtpLike,
    "platformer": Platformer,
    "longprefix": LongPrefix,
}


def make_target(name: str, **options) -> Target:
    try:
        cls = TARGETS[name]
    except KeyError:
        raise KeyError(f"unknown target {name!r}; choose from {', '.join(sorted(TARGETS))}") from None
    return cls(**options)


__all__ = [
    "DEFAULT_OP_BUDGET", "BootError", "Context", "ExecResult", "Exit", "Guest", "Step", "Target",
    "TargetCrash", "TARGETS", "make_target", "FtpLike", "LongPrefix", "Platformer",
]
