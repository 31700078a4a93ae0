"""Structure-aware mutation of bytecode programs.

Only ops at or after ``fuzz_from`` are ever touched, so everything covered
by an incremental snapshot stays byte-identical. Every mutant validates.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from snapfuzz.bytecode import BytecodeProgram, FormatSpec, Op

INTERESTING_8 = (-128, -1, 0, 1, 16, 32, 64, 100, 127)
INTERESTING_16 = (-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767)
INTERESTING_32 = (-2147483648, -100663046, -32769, 32768, 65535, 65536, 100663045, 2147483647)

MUTATIONS = ("havoc", "duplicate", "drop", "swap", "splice", "append")


@dataclass
class MutatorConfig:
    weights: dict[str, float] = field(default_factory=lambda: {m: 1.0 for m in MUTATIONS})
    min_stack: int = 1
    max_stack: int = 8
    max_payload: int = 4096
    max_ops: int = 512


class _Item:
    __slots__ = ("uid", "node", "refs", "payload")

    def __init__(self, uid, node, refs, payload):
        self.uid = uid
        self.node = node
        self.refs = refs  # uids of producing items
        self.payload = payload


def havoc_bytes(data: bytes, rng: random.Random, max_len: int = 4096) -> bytes:
    """One AFL-style byte-level mutation. Never returns an empty result."""
    buf = bytearray(data) or bytearray(b"\x00")
    n = len(buf)
    choice = rng.randrange(9)
    if choice == 0:
        pos = rng.randrange(n * 8)
        buf[pos >> 3] ^= 0x80 >> (pos & 7)
    elif choice == 1:
        buf[rng.randrange(n)] = rng.randrange(256)
    elif choice == 2:
        buf[rng.randrange(n)] = rng.choice(INTERESTING_8) & 0xFF
    elif choice == 3 and n >= 2:
        pos = rng.randrange(n - 1)
        v = rng.choice(INTERESTING_16) & 0xFFFF
        buf[pos:pos + 2] = v.to_bytes(2, rng.choice(("little", "big")))
    elif choice == 4 and n >= 4:
        pos = rng.randrange(n - 3)
        v = rng.choice(INTERESTING_32) & 0xFFFFFFFF
        buf[pos:pos + 4] = v.to_bytes(4, rng.choice(("little", "big")))
    elif choice == 5:
        pos = rng.randrange(n)
        buf[pos] = (buf[pos] + rng.choice((-1, 1)) * rng.randint(1, 35)) & 0xFF
    elif choice == 6 and n < max_len:
        start = rng.randrange(n)
        length = rng.randint(1, min(n - start, 32))
        at = rng.randrange(n + 1)
        buf[at:at] = buf[start:start + length]
    elif choice == 7 and n >= 2:
        start = rng.randrange(n)
        length = rng.randint(1, min(n - start, max(1, n - 1), 32))
        if length < n:
            del buf[start:start + length]
    else:
        at = rng.randrange(n + 1)
        buf[at:at] = bytes(rng.randrange(256) for _ in range(rng.randint(1, 4)))
    return bytes(buf[:max_len])


class _Mutant:
    def __init__(self, spec: FormatSpec, p: BytecodeProgram, fuzz_from: int):
        self.spec = spec
        self.fuzz_from = fuzz_from
        self.items = [_Item(i, op.node, op.refs, op.payload) for i, op in enumerate(p.ops)]
        self.next_uid = len(self.items)

    def pos_of(self, uid: int) -> int:
        for i, it in enumerate(self.items):
            if it.uid == uid:
                return i
        raise KeyError(uid)

    def suffix(self, pred) -> list[int]:
        return [i for i in range(self.fuzz_from, len(self.items)) if pred(self.items[i])]

    def is_packet(self, it: _Item) -> bool:
        return self.spec.nodes[it.node].is_packet

    def has_data(self, it: _Item) -> bool:
        return self.spec.nodes[it.node].data is not None

    def earliest_pos(self, it: _Item) -> int:
        """Smallest position ``it`` may occupy given its borrowed handles."""
        if not it.refs:
            return self.fuzz_from
        return max(self.fuzz_from, max(self.pos_of(u) for u in it.refs) + 1)

    def producers_before(self, pos: int, kind: str) -> list[int]:
        return [it.uid for it in self.items[:pos] if self.spec.nodes[it.node].produces == kind]

    def new_item(self, node: int, refs, payload) -> _Item:
        it = _Item(self.next_uid, node, tuple(refs), payload)
        self.next_uid += 1
        return it

    def finish(self) -> tuple[Op, ...]:
        index = {it.uid: i for i, it in enumerate(self.items)}
        return tuple(Op(it.node, tuple(index[u] for u in it.refs), it.payload) for it in self.items)


def _havoc(m: _Mutant, rng, cfg) -> bool:
    cands = m.suffix(m.has_data)
    if not cands:
        return False
    it = m.items[rng.choice(cands)]
    it.payload = havoc_bytes(it.payload, rng, cfg.max_payload)
    return True


def _duplicate(m: _Mutant, rng, cfg) -> bool:
    cands = m.suffix(m.is_packet)
    if not cands or len(m.items) >= cfg.max_ops:
        return False
    src = m.items[rng.choice(cands)]
    lo = m.earliest_pos(src)
    m.items.insert(rng.randint(lo, len(m.items)), m.new_item(src.node, src.refs, src.payload))
    return True


def _drop(m: _Mutant, rng, cfg) -> bool:
    cands = m.suffix(m.is_packet)
    if len(cands) < 2:
        return False
    del m.items[rng.choice(cands)]
    return True


def _swap(m: _Mutant, rng, cfg) -> bool:
    cands = m.suffix(m.is_packet)
    if len(cands) < 2:
        return False
    i, j = sorted(rng.sample(cands, 2))
    a, b = m.items[i], m.items[j]
    # b moves earlier, so its borrowed handles must already exist at i
    if m.earliest_pos(b) > i:
        return False
    m.items[i], m.items[j] = b, a
    return True


def _insert_packet(m: _Mutant, rng, cfg, payload: bytes, at_end: bool) -> bool:
    if len(m.items) >= cfg.max_ops:
        return False
    nodes = m.spec.packet_nodes()
    if not nodes:
        return False
    node = rng.choice(nodes)
    nt = m.spec.nodes[node]
    pos = len(m.items) if at_end else rng.randint(m.fuzz_from, len(m.items))
    refs = []
    for kind in nt.borrows:
        options = m.producers_before(pos, kind)
        if not options:
            return False
        refs.append(rng.choice(options))
    m.items.insert(pos, m.new_item(node, refs, payload[: cfg.max_payload] or b"\x00"))
    return True


def _splice(m: _Mutant, rng, cfg, corpus) -> bool:
    # pick a program first, then one of its payloads; avoids flattening the corpus
    for _ in range(4):
        if not corpus:
            return False
        pool = [op.payload for op in rng.choice(corpus).ops if op.payload]
        if pool:
            return _insert_packet(m, rng, cfg, rng.choice(pool), at_end=False)
    return False


def _append(m: _Mutant, rng, cfg) -> bool:
    existing = [it.payload for it in m.items if it.payload]
    if existing and rng.random() < 0.5:
        payload = havoc_bytes(rng.choice(existing), rng, cfg.max_payload)
    else:
        payload = bytes(rng.randrange(256) for _ in range(rng.randint(1, 16)))
    return _insert_packet(m, rng, cfg, payload, at_end=True)


def mutate(
    spec: FormatSpec,
    p: BytecodeProgram,
    rng: random.Random,
    corpus: Sequence[BytecodeProgram] = (),
    fuzz_from: int = 0,
    cfg: MutatorConfig | None = None,
) -> BytecodeProgram:
    """Apply a stack of 1-8 mutations to the ops at or after ``fuzz_from``."""
    cfg = cfg or MutatorConfig()
    if not 0 <= fuzz_from <= len(p.ops):
        raise ValueError(f"fuzz_from {fuzz_from} outside [0, {len(p.ops)}]")
    m = _Mutant(spec, p, fuzz_from)
    names = [n for n in MUTATIONS if cfg.weights.get(n, 0) > 0]
    weights = [cfg.weights[n] for n in names]
    for _ in range(rng.randint(cfg.min_stack, cfg.max_stack)):
        name = rng.choices(names, weights)[0]
        if name == "havoc":
            done = _havoc(m, rng, cfg)
        elif name == "duplicate":
            done = _duplicate(m, rng, cfg)
        elif name == "drop":
            done = _drop(m, rng, cfg)
        elif name == "swap":
            done = _swap(m, rng, cfg)
        elif name == "splice":
            done = _splice(m, rng, cfg, corpus)
        else:
            done = _append(m, rng, cfg)
        if not done:
            _havoc(m, rng, cfg) or _append(m, rng, cfg)
    ops = m.finish()
    k = p.snapshot_index
    if k is not None and not 0 < k < len(ops):
        k = None
    return BytecodeProgram(ops, k)
