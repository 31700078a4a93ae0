"""Built-in seed programs for the bundled targets."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from snapfuzz.bytecode import BytecodeProgram, FormatSpec, spec_parse
from snapfuzz.guest.longprefix import handshake_packet
from snapfuzz.guest.platformer import Level, load_level, seed_frames
from snapfuzz.seed_import import build_seed, dissect_dump, load_dump

LONGPREFIX_SUFFIX = (
    b"A1", b"BO", b"C", b"A2", b"C", b"DB", b"Q", b"BOK", b"A", b"C",
    b"D", b"B", b"C", b"A1", b"Z", b"C", b"BO", b"A2", b"D", b"C",
)


def default_spec() -> FormatSpec:
    return spec_parse(resources.files("snapfuzz.data").joinpath("network.spec").read_text())


def ftp_session_seed(spec: FormatSpec) -> BytecodeProgram:
    path = resources.files("snapfuzz.data").joinpath("ftp_session.jsonl")
    with resources.as_file(path) as p:
        packets = dissect_dump(load_dump(p, "jsonl"), "crlf")
    return build_seed(spec, packets)


def longprefix_seed(spec: FormatSpec, prefix_len: int = 100, suffix: tuple[bytes, ...] = LONGPREFIX_SUFFIX) -> BytecodeProgram:
    packets = [handshake_packet(i) for i in range(prefix_len)]
    packets += [cmd + b"\r\n" for cmd in suffix]
    return build_seed(spec, packets)


@lru_cache(maxsize=4)
def _frames(level: Level) -> tuple[int, ...]:
    return tuple(seed_frames(level))


def platformer_seed(spec: FormatSpec, level: Level | None = None) -> BytecodeProgram:
    return build_seed(spec, [bytes([b]) for b in _frames(level or load_level())])


def default_seeds(target: str, spec: FormatSpec, **options) -> list[BytecodeProgram]:
    if target == "ftp_like":
        return [ftp_session_seed(spec)]
    if target == "longprefix":
        return [longprefix_seed(spec, options.get("prefix_len", 100))]
    if target == "platformer":
        return [platformer_seed(spec, options.get("level"))]
    raise KeyError(f"no built-in seeds for target {target!r}")
