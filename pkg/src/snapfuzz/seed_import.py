"""Turn captured packet dumps into bytecode seeds.

Two portable dump formats are read:

``jsonl``
    one record per line, ``{"dir": "c2s" | "s2c", "hex": "<payload hex>"}``
``rawdir``
    a directory of ``NNN_c2s.bin`` / ``NNN_s2c.bin`` files, taken in lexical order

PCAP files can be converted to jsonl with tshark, e.g.::

    tshark -r dump.pcap -Y tcp.len>0 -T fields -e tcp.dstport -e tcp.payload \\
      | awk '{d = ($1 == 21) ? "c2s" : "s2c"; printf "{\\"dir\\": \\"%s\\", \\"hex\\": \\"%s\\"}\\n", d, $2}'
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from snapfuzz.bytecode import BytecodeProgram, FormatSpec, GraphBuilder, ProgramError

TO_TARGET = "c2s"
FROM_TARGET = "s2c"
DISSECTORS = ("crlf", "lenprefix", "asis")

_RAW_NAME = re.compile(r"^(\d+)_(c2s|s2c)\.bin$")


class DumpError(ValueError):
    """Malformed dump input; the message names the offending line or file."""


@dataclass(frozen=True)
class Record:
    direction: str
    payload: bytes


@dataclass(frozen=True)
class PacketDump:
    records: tuple[Record, ...]
    source: str

    def to_target(self) -> list[bytes]:
        return [r.payload for r in self.records if r.direction == TO_TARGET]


def load_dump(path, fmt: str = "jsonl") -> PacketDump:
    path = Path(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    if fmt == "rawdir":
        return _load_rawdir(path)
    raise DumpError(f"unknown dump format {fmt!r}")


def _load_jsonl(path: Path) -> PacketDump:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                direction = obj["dir"]
                payload = bytes.fromhex(obj["hex"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DumpError(f"{path}:{lineno}: bad record ({e})") from None
            if direction not in (TO_TARGET, FROM_TARGET):
                raise DumpError(f"{path}:{lineno}: direction must be c2s or s2c, got {direction!r}")
            if not payload:
                raise DumpError(f"{path}:{lineno}: empty payload")
            records.append(Record(direction, payload))
    return PacketDump(tuple(records), str(path))


def _load_rawdir(path: Path) -> PacketDump:
    if not path.is_dir():
        raise DumpError(f"{path}: not a directory")
    records = []
    for f in sorted(path.iterdir()):
        m = _RAW_NAME.match(f.name)
        if not m:
            raise DumpError(f"{f}: file name must look like NNN_c2s.bin or NNN_s2c.bin")
        payload = f.read_bytes()
        if not payload:
            raise DumpError(f"{f}: empty payload")
        records.append(Record(m.group(2), payload))
    return PacketDump(tuple(records), str(path))


def dissect(stream: bytes, kind: str = "crlf", boundaries: list[bytes] | None = None) -> list[bytes]:
    """Split a to-target byte stream into logical packets.

    ``asis`` keeps the original record boundaries, which must be passed in
    ``boundaries``; the other dissectors only look at ``stream``.
    """
    if kind == "crlf":
        packets, start = [], 0
        while True:
            i = stream.find(b"\r\n", start)
            if i < 0:
                break
            packets.append(stream[start:i + 2])
            start = i + 2
        if start < len(stream):
            packets.append(stream[start:])
        return packets
    if kind == "lenprefix":
        packets, pos = [], 0
        while pos < len(stream):
            if pos + 2 > len(stream):
                raise DumpError(f"truncated length header at offset {pos}")
            n = int.from_bytes(stream[pos:pos + 2], "big")
            if pos + 2 + n > len(stream):
                raise DumpError(f"frame at offset {pos} wants {n} bytes, {len(stream) - pos - 2} left")
            packets.append(stream[pos + 2:pos + 2 + n])
            pos += 2 + n
        return packets
    if kind == "asis":
        if boundaries is None:
            raise DumpError("asis dissection needs the original records")
        return [bytes(b) for b in boundaries]
    raise DumpError(f"unknown dissector {kind!r}; choose from {', '.join(DISSECTORS)}")


def dissect_dump(dump: PacketDump, kind: str = "crlf") -> list[bytes]:
    chunks = dump.to_target()
    return dissect(b"".join(chunks), kind, boundaries=chunks)


def build_seed(spec: FormatSpec, packets: list[bytes]) -> BytecodeProgram:
    """One connection, then one packet op per logical packet on it."""
    if not packets:
        raise ProgramError(["no packets to build a seed from"])
    open_node = next((n for n in spec.nodes if n.produces and not n.borrows), None)
    if open_node is None:
        raise ProgramError(["spec has no connection-open node (produces a handle, borrows none)"])
    pkt_node = next(
        (n for n in spec.nodes if n.data is not None and n.borrows == (open_node.produces,)), None
    )
    if pkt_node is None:
        raise ProgramError([f"spec has no packet node borrowing {open_node.produces}"])
    b = GraphBuilder(spec)
    con = b.call(open_node.name)
    for payload in packets:
        if payload:
            b.call(pkt_node.name, [con], payload)
    return b.build()
