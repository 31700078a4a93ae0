"""In-process socket emulation for simulated targets.

The bytecode VM pushes connections and packets in; the target pulls them out
through a small socket-like API. One ``recv`` never returns bytes from two
different packets, and ``readiness`` reports only the handle the next
undelivered event is destined for.

All state round-trips through :meth:`EmuNet.to_bytes` so it can live in a
snapshot's aux blob.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from snapfuzz.wire import DecodeError, Reader, Writer

LISTENER = 0
CONNECTION = 1

_VERSION = 1


class NetError(Exception):
    """Misuse of the emulated socket API by the target."""


class _Signal:
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name


WOULD_BLOCK = _Signal("WOULD_BLOCK")
PEER_CLOSED = _Signal("PEER_CLOSED")


@dataclass
class NetHandle:
    id: int
    kind: int
    target: int  # listener index or connection id
    open: bool = True


@dataclass
class ConnState:
    id: int
    listener: int
    pending: deque = field(default_factory=deque)  # (seq, payload)
    read_offset: int = 0
    transcript: bytearray = field(default_factory=bytearray)
    aliases: set = field(default_factory=set)


@dataclass
class _Listener:
    addr: str
    handle: int
    backlog: deque = field(default_factory=deque)  # (seq, conn id)


class EmuNet:
    def __init__(self):
        self.listeners: list[_Listener] = []
        self.handles: dict[int, NetHandle] = {}
        self.conns: dict[int, ConnState] = {}
        self.slots: dict[int, int] = {}  # bytecode slot -> connection id
        self.finished = False
        self.next_handle = 3  # mimic fds: 0-2 are taken
        self.next_conn = 1
        self.next_seq = 1
        self.packets_consumed = 0
        self.bytes_consumed = 0
        self.dropped = 0

    # ---- target side -----------------------------------------------------

    def listen(self, addr: str) -> int:
        if any(l.addr == addr for l in self.listeners):
            raise NetError(f"duplicate listener on {addr!r}")
        hid = self._new_handle(LISTENER, len(self.listeners))
        self.listeners.append(_Listener(addr, hid))
        return hid

    def accept(self, h: int):
        handle = self._handle(h, LISTENER)
        backlog = self.listeners[handle.target].backlog
        if not backlog:
            return WOULD_BLOCK
        _, cid = backlog.popleft()
        hid = self._new_handle(CONNECTION, cid)
        self.conns[cid].aliases.add(hid)
        return hid

    def recv(self, h: int, max_len: int):
        conn = self._conn(h)
        if not conn.pending:
            return PEER_CLOSED if self.finished else WOULD_BLOCK
        _, head = conn.pending[0]
        start = conn.read_offset
        chunk = head[start:start + max(0, max_len)]
        conn.read_offset += len(chunk)
        if conn.read_offset >= len(head):
            conn.pending.popleft()
            conn.read_offset = 0
            self.packets_consumed += 1
        self.bytes_consumed += len(chunk)
        return chunk

    def send(self, h: int, data: bytes) -> int:
        conn = self._conn(h)
        conn.transcript += data
        return len(data)

    def readiness(self, handles) -> set[int]:
        best = None
        for lst in self.listeners:
            if lst.backlog and (best is None or lst.backlog[0][0] < best[0]):
                best = (lst.backlog[0][0], LISTENER, lst.handle)
        for conn in self.conns.values():
            if conn.pending and (best is None or conn.pending[0][0] < best[0]):
                best = (conn.pending[0][0], CONNECTION, conn.id)
        if best is None:
            return set()
        _, kind, ref = best
        wanted = set(handles)
        if kind == LISTENER:
            return {ref} & wanted
        return {h for h in self.conns[ref].aliases if h in wanted}

    def alias(self, h: int) -> int:
        conn = self._conn(h)
        hid = self._new_handle(CONNECTION, conn.id)
        conn.aliases.add(hid)
        return hid

    def close(self, h: int) -> None:
        handle = self.handles.get(h)
        if handle is None or not handle.open:
            raise NetError(f"close of closed or unknown handle {h}")
        handle.open = False
        if handle.kind == CONNECTION:
            conn = self.conns[handle.target]
            conn.aliases.discard(h)
            if not conn.aliases:
                self.dropped += len(conn.pending)
                del self.conns[conn.id]
        else:
            lst = self.listeners[handle.target]
            for _, cid in lst.backlog:
                self.conns.pop(cid, None)
            lst.backlog.clear()

    def is_attack_surface(self, h: int) -> bool:
        """Every listener, and every connection accepted from one, is fed by the bytecode."""
        handle = self.handles.get(h)
        return handle is not None and handle.open

    def transcript(self, h: int) -> bytes:
        return bytes(self._conn(h).transcript)

    # ---- VM side ---------------------------------------------------------

    def open_connection(self, slot: int, listener: int = 0) -> bool:
        """Queue a new inbound connection on ``listener``; False if nobody listens there."""
        if listener >= len(self.listeners):
            return False
        lst = self.listeners[listener]
        if not self.handles[lst.handle].open:
            return False
        cid = self.next_conn
        self.next_conn += 1
        self.conns[cid] = ConnState(cid, listener)
        lst.backlog.append((self._seq(), cid))
        self.slots[slot] = cid
        return True

    def deliver(self, slot: int, payload: bytes) -> bool:
        cid = self.slots.get(slot)
        conn = self.conns.get(cid) if cid is not None else None
        if conn is None or not payload:
            self.dropped += 1
            return False
        conn.pending.append((self._seq(), bytes(payload)))
        return True

    def finish(self) -> None:
        self.finished = True

    # ---- internals -------------------------------------------------------

    def _seq(self) -> int:
        s = self.next_seq
        self.next_seq += 1
        return s

    def _new_handle(self, kind: int, target: int) -> int:
        hid = self.next_handle
        self.next_handle += 1
        self.handles[hid] = NetHandle(hid, kind, target)
        return hid

    def _handle(self, h: int, kind: int) -> NetHandle:
        handle = self.handles.get(h)
        if handle is None or not handle.open:
            raise NetError(f"handle {h} is closed or unknown")
        if handle.kind != kind:
            raise NetError(f"handle {h} has the wrong kind")
        return handle

    def _conn(self, h: int) -> ConnState:
        return self.conns[self._handle(h, CONNECTION).target]

    # ---- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        w = Writer()
        w.u8(_VERSION).u8(int(self.finished))
        w.u32(self.next_handle).u32(self.next_conn).u64(self.next_seq)
        w.u64(self.packets_consumed).u64(self.bytes_consumed).u64(self.dropped)
        w.u32(len(self.listeners))
        for lst in self.listeners:
            w.blob(lst.addr.encode()).u32(lst.handle).u32(len(lst.backlog))
            for seq, cid in lst.backlog:
                w.u64(seq).u32(cid)
        w.u32(len(self.handles))
        for hid in sorted(self.handles):
            hd = self.handles[hid]
            w.u32(hid).u8(hd.kind).u32(hd.target).u8(int(hd.open))
        w.u32(len(self.conns))
        for cid in sorted(self.conns):
            c = self.conns[cid]
            w.u32(cid).u32(c.listener).u32(c.read_offset).blob(bytes(c.transcript))
            w.u32(len(c.pending))
            for seq, payload in c.pending:
                w.u64(seq).blob(payload)
            w.u32(len(c.aliases))
            for a in sorted(c.aliases):
                w.u32(a)
        w.u32(len(self.slots))
        for slot in sorted(self.slots):
            w.u32(slot).u32(self.slots[slot])
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> EmuNet:
        r = Reader(data)
        version = r.u8()
        if version != _VERSION:
            raise DecodeError(f"unsupported emu_net state version {version}", 0)
        net = cls()
        net.finished = bool(r.u8())
        net.next_handle, net.next_conn, net.next_seq = r.u32(), r.u32(), r.u64()
        net.packets_consumed, net.bytes_consumed, net.dropped = r.u64(), r.u64(), r.u64()
        for _ in range(r.u32()):
            lst = _Listener(r.blob().decode(), r.u32())
            for _ in range(r.u32()):
                lst.backlog.append((r.u64(), r.u32()))
            net.listeners.append(lst)
        for _ in range(r.u32()):
            hid = r.u32()
            net.handles[hid] = NetHandle(hid, r.u8(), r.u32(), bool(r.u8()))
        for _ in range(r.u32()):
            cid = r.u32()
            c = ConnState(cid, r.u32())
            c.read_offset = r.u32()
            c.transcript = bytearray(r.blob())
            for _ in range(r.u32()):
                c.pending.append((r.u64(), r.blob()))
            c.aliases = {r.u32() for _ in range(r.u32())}
            net.conns[cid] = c
        for _ in range(r.u32()):
            slot = r.u32()
            net.slots[slot] = r.u32()
        r.expect_end()
        return net
