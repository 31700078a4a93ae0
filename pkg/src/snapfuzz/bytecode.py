"""Format specifications, the flat NXB1 bytecode program format, and the seed graph builder.

A format spec declares handle kinds, data kinds and nodes (opcodes). A
program is a flat list of node invocations; op ``i`` that produces a handle
defines value slot ``i`` and later ops borrow it by slot index. An optional
snapshot marker sits between two ops.

Spec document grammar, one declaration per line, ``#`` starts a comment::

    handle e_con
    data d_bytes
    node con_open produces=e_con
    node pkt borrows=e_con data=d_bytes
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

from snapfuzz.wire import DecodeError, Reader, Writer

MAGIC = b"NXB1"
SNAPSHOT_NODE_ID = 0xFFFF
MAX_NODES = 0xFFFF


class SpecError(ValueError):
    """Malformed format specification document."""


class ProgramError(ValueError):
    """A program failed to parse or validate; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str], offset: int | None = None):
        self.violations = list(violations)
        self.offset = offset
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class NodeType:
    name: str
    borrows: tuple[str, ...] = ()
    produces: str | None = None
    data: str | None = None

    @property
    def is_packet(self) -> bool:
        """Carries a payload and produces nothing, so it can be moved or dropped freely."""
        return self.data is not None and self.produces is None


@dataclass(frozen=True)
class FormatSpec:
    handle_kinds: tuple[str, ...]
    data_types: tuple[str, ...]
    nodes: tuple[NodeType, ...]
    _ids: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_ids", {n.name: i for i, n in enumerate(self.nodes)})

    def node_id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise KeyError(f"unknown node {name!r}") from None

    def node(self, name_or_id) -> NodeType:
        if isinstance(name_or_id, str):
            return self.nodes[self.node_id(name_or_id)]
        return self.nodes[name_or_id]

    def producers_of(self, kind: str) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.produces == kind]

    def packet_nodes(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.is_packet]


def spec_parse(text: str) -> FormatSpec:
    handles: list[str] = []
    datas: list[str] = []
    nodes: list[NodeType] = []
    seen: set[str] = set()

    def declare(name: str, lineno: int) -> None:
        if not name.isidentifier():
            raise SpecError(f"line {lineno}: invalid name {name!r}")
        if name in seen:
            raise SpecError(f"line {lineno}: duplicate name {name!r}")
        seen.add(name)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *rest = line.split()
        if word in ("handle", "data"):
            if len(rest) != 1:
                raise SpecError(f"line {lineno}: expected '{word} <name>'")
            declare(rest[0], lineno)
            (handles if word == "handle" else datas).append(rest[0])
        elif word == "node":
            if not rest:
                raise SpecError(f"line {lineno}: node needs a name")
            name, attrs = rest[0], rest[1:]
            declare(name, lineno)
            kw: dict[str, str] = {}
            for attr in attrs:
                key, sep, value = attr.partition("=")
                if not sep or key not in ("borrows", "produces", "data") or key in kw:
                    raise SpecError(f"line {lineno}: bad node attribute {attr!r}")
                kw[key] = value
            borrows = tuple(k for k in kw.get("borrows", "").split(",") if k)
            produces = kw.get("produces") or None
            data = kw.get("data") or None
            for k in borrows + ((produces,) if produces else ()):
                if k not in handles:
                    raise SpecError(f"line {lineno}: undeclared handle kind {k!r}")
            if data is not None and data not in datas:
                raise SpecError(f"line {lineno}: undeclared data type {data!r}")
            nodes.append(NodeType(name, borrows, produces, data))
        else:
            raise SpecError(f"line {lineno}: unknown declaration {word!r}")
    if not nodes:
        raise SpecError("spec declares no nodes")
    if len(nodes) >= MAX_NODES:
        raise SpecError("too many nodes")
    return FormatSpec(tuple(handles), tuple(datas), tuple(nodes))


class Op(NamedTuple):
    node: int
    refs: tuple[int, ...] = ()
    payload: bytes = b""


@dataclass(frozen=True)
class BytecodeProgram:
    ops: tuple[Op, ...]
    snapshot_index: int | None = None

    def __len__(self) -> int:
        return len(self.ops)

    def with_snapshot(self, k: int | None) -> BytecodeProgram:
        return BytecodeProgram(self.ops, k)

    def stripped(self) -> BytecodeProgram:
        return BytecodeProgram(self.ops, None)

    def packet_positions(self, spec: FormatSpec) -> list[int]:
        """Op indices of packet ops, in order."""
        return [i for i, op in enumerate(self.ops) if spec.nodes[op.node].is_packet]

    def serialize(self) -> bytes:
        return program_serialize(self)


def program_validate(spec: FormatSpec, p: BytecodeProgram) -> list[str]:
    """Return every violation found (empty list means valid)."""
    out: list[str] = []
    produced: list[str | None] = []
    for i, op in enumerate(p.ops):
        if not 0 <= op.node < len(spec.nodes):
            out.append(f"op {i}: unknown node id {op.node}")
            produced.append(None)
            continue
        nt = spec.nodes[op.node]
        if len(op.refs) != len(nt.borrows):
            out.append(f"op {i}: {nt.name} takes {len(nt.borrows)} handle(s), got {len(op.refs)}")
        for ref, kind in zip(op.refs, nt.borrows):
            if ref >= i:
                out.append(f"op {i}: forward reference to slot {ref}")
            elif produced[ref] is None:
                out.append(f"op {i}: slot {ref} holds no handle")
            elif produced[ref] != kind:
                out.append(f"op {i}: slot {ref} is {produced[ref]}, expected {kind}")
        if nt.data is None and op.payload:
            out.append(f"op {i}: {nt.name} takes no payload")
        produced.append(nt.produces)
    k = p.snapshot_index
    if k is not None and not 0 < k < len(p.ops):
        out.append(f"snapshot index {k} outside (0, {len(p.ops)})")
    return out


def program_serialize(p: BytecodeProgram) -> bytes:
    w = Writer().raw(MAGIC)
    w.u32(len(p.ops) + (p.snapshot_index is not None))
    for i, op in enumerate(p.ops):
        if i == p.snapshot_index:
            w.u16(SNAPSHOT_NODE_ID).u16(0).u32(0)
        w.u16(op.node).u16(len(op.refs))
        for ref in op.refs:
            w.u32(ref)
        w.blob(op.payload)
    return w.getvalue()


def program_decode(data: bytes) -> BytecodeProgram:
    """Structural decode without a spec; raises :class:`ProgramError` on any malformed input."""
    r = Reader(data)
    try:
        if r.raw(4) != MAGIC:
            raise ProgramError(["bad magic"], 0)
        count = r.u32()
        ops: list[Op] = []
        snap = None
        for _ in range(count):
            node = r.u16()
            nrefs = r.u16()
            refs = tuple(r.u32() for _ in range(nrefs))
            payload = r.blob()
            if node == SNAPSHOT_NODE_ID:
                if snap is not None:
                    raise ProgramError(["more than one snapshot marker"], r.pos)
                if refs or payload:
                    raise ProgramError(["snapshot marker carries arguments"], r.pos)
                snap = len(ops)
            else:
                ops.append(Op(node, refs, payload))
        r.expect_end()
    except DecodeError as e:
        raise ProgramError([str(e)], e.offset) from None
    return BytecodeProgram(tuple(ops), snap)


def program_parse(spec: FormatSpec, data: bytes) -> BytecodeProgram:
    p = program_decode(data)
    violations = program_validate(spec, p)
    if violations:
        raise ProgramError(violations)
    return p


_builder_ids = itertools.count(1)


@dataclass(frozen=True)
class Token:
    """Stands for the handle returned by one builder call."""

    builder: int
    index: int
    kind: str


class GraphBuilder:
    """Records node calls and serialises them into a flat program.

    Every node in the spec is also reachable as a method, so seeds read like
    code::

        b = GraphBuilder(spec)
        c = b.con_open()
        b.pkt(c, b"USER ftp\\r\\n")
    """

    def __init__(self, spec: FormatSpec):
        self.spec = spec
        self.id = next(_builder_ids)
        self.calls: list[Op] = []
        self.snapshot_index: int | None = None

    def call(self, node: str, args=(), payload: bytes = b"") -> Token | None:
        nt = self.spec.node(node)
        args = tuple(args)
        if len(args) != len(nt.borrows):
            raise TypeError(f"{node} takes {len(nt.borrows)} handle(s), got {len(args)}")
        for tok, kind in zip(args, nt.borrows):
            if not isinstance(tok, Token) or tok.builder != self.id:
                raise ValueError(f"{node}: argument {tok!r} was not produced by this builder")
            if tok.kind != kind:
                raise TypeError(f"{node}: expected {kind}, got {tok.kind}")
        if nt.data is None and payload:
            raise TypeError(f"{node} takes no payload")
        index = len(self.calls)
        self.calls.append(Op(self.spec.node_id(node), tuple(t.index for t in args), bytes(payload)))
        return Token(self.id, index, nt.produces) if nt.produces else None

    def snapshot(self) -> None:
        """Place the snapshot marker after the calls made so far."""
        self.snapshot_index = len(self.calls)

    def __getattr__(self, name: str):
        spec = self.__dict__.get("spec")
        if spec is None or name not in spec._ids:
            raise AttributeError(name)
        nt = spec.node(name)

        def node_call(*args):
            if nt.data is not None and len(args) == len(nt.borrows) + 1:
                return self.call(name, args[:-1], args[-1])
            return self.call(name, args)

        return node_call

    def build(self) -> BytecodeProgram:
        if not self.calls:
            raise ProgramError(["builder has no calls"])
        p = BytecodeProgram(tuple(self.calls), self.snapshot_index)
        violations = program_validate(self.spec, p)
        if violations:
            raise ProgramError(violations)
        return p
