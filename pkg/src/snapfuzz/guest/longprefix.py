"""Target with a long scripted handshake followed by a small branching command space.

Every handshake packet must match the script exactly or the target drops
the connection, so all interesting behaviour sits behind ``prefix_len``
packets. That is the case where incremental snapshots pay off most.
"""

from __future__ import annotations

from snapfuzz.coverage import site_id
from snapfuzz.emu_net import PEER_CLOSED, WOULD_BLOCK
from snapfuzz.guest.engine import Context, Step, Target, TargetCrash

SITE_DEEP = site_id("longprefix:crash:deep")

PAGE = 4096
G_PC, G_LISTENER, G_CONN, G_HS, G_CCOUNT, G_LAST = 0, 4, 8, 12, 16, 20
LOG_BASE, LOG_ENTRY = PAGE, 64
WORK_PER_HANDSHAKE = 50

_S = {name: site_id(f"longprefix:{name}") for name in (
    "accept", "hs:ok", "hs:bad", "hs:done", "eof", "empty",
    "A", "A:1", "A:2", "B", "B:O", "B:OK", "C", "C:3", "C:7", "D", "D:B", "D:BO", "D:BOO", "other",
)}


def handshake_packet(i: int) -> bytes:
    return b"HELLO %03d %08x\r\n" % (i, (i * 2654435761) & 0xFFFFFFFF)


class LongPrefix(Target):
    name = "longprefix"

    def __init__(self, prefix_len: int = 100):
        self.prefix_len = prefix_len
        # one 64-byte log record per handshake packet
        self.num_pages = 2 + (prefix_len * LOG_ENTRY) // PAGE + 2

    def step(self, ctx: Context) -> Step:
        pc = ctx.get(G_PC, 1)
        if pc == 0:
            ctx.put(G_LISTENER, ctx.net.listen("tcp:7000"))
            ctx.put(G_PC, 1, 1)
            return Step.CONTINUE
        if pc == 1:
            listener = ctx.get(G_LISTENER)
            if listener not in ctx.net.readiness([listener]):
                return Step.BLOCK
            conn = ctx.net.accept(listener)
            if conn is WOULD_BLOCK:
                return Step.BLOCK
            ctx.edge(_S["accept"])
            ctx.put(G_CONN, conn)
            ctx.put(G_PC, 2, 1)
            return Step.CONTINUE
        conn = ctx.get(G_CONN)
        data = ctx.net.recv(conn, 256)
        if data is WOULD_BLOCK:
            return Step.BLOCK
        if data is PEER_CLOSED:
            ctx.edge(_S["eof"])
            return Step.DONE
        hs = ctx.get(G_HS)
        if hs < self.prefix_len:
            return self._handshake(ctx, conn, hs, data)
        self._command(ctx, conn, data)
        return Step.CONTINUE

    def _handshake(self, ctx: Context, conn: int, hs: int, data: bytes) -> Step:
        if data != handshake_packet(hs):
            ctx.edge(_S["hs:bad"])
            ctx.net.send(conn, b"ERR handshake\r\n")
            return Step.DONE
        ctx.edge(_S["hs:ok"])
        # stands in for expensive per-message processing
        ctx.tick(WORK_PER_HANDSHAKE)
        ctx.write(LOG_BASE + hs * LOG_ENTRY, data[:LOG_ENTRY].ljust(LOG_ENTRY, b"\0"))
        ctx.put(G_HS, hs + 1)
        if hs + 1 == self.prefix_len:
            ctx.edge(_S["hs:done"])
            ctx.net.send(conn, b"OK ready\r\n")
        return Step.CONTINUE

    def _command(self, ctx: Context, conn: int, data: bytes) -> None:
        ctx.put(G_LAST, data[0], 1)
        cmd = data[:1]
        if cmd == b"A":
            ctx.edge(_S["A"])
            if data[1:2] == b"1":
                ctx.edge(_S["A:1"])
            elif data[1:2] == b"2":
                ctx.edge(_S["A:2"])
        elif cmd == b"B":
            ctx.edge(_S["B"])
            if data[1:2] == b"O":
                ctx.edge(_S["B:O"])
                if data[2:3] == b"K":
                    ctx.edge(_S["B:OK"])
        elif cmd == b"C":
            ctx.edge(_S["C"])
            count = ctx.get(G_CCOUNT) + 1
            ctx.put(G_CCOUNT, count)
            if count == 3:
                ctx.edge(_S["C:3"])
            elif count == 7:
                ctx.edge(_S["C:7"])
        elif cmd == b"D":
            ctx.edge(_S["D"])
            if data[1:2] == b"B":
                ctx.edge(_S["D:B"])
                if data[2:3] == b"O":
                    ctx.edge(_S["D:BO"])
                    if data[3:4] == b"O":
                        ctx.edge(_S["D:BOO"])
                        if data[4:5] == b"M":
                            raise TargetCrash(SITE_DEEP, "DBOOM")
        else:
            ctx.edge(_S["other"])
        ctx.net.send(conn, b"ACK\r\n")
