"""Line-oriented stateful command server loosely modelled on FTP.

Planted bugs:

* site A: ``CRSH`` while the session is logged in and in the hidden
  ``MODE X``; needs USER, PASS, MODE X, CRSH in that order.
* site B: ``SITE`` followed by an 8-byte magic argument compared in one go.
"""

from __future__ import annotations

from snapfuzz.coverage import site_id
from snapfuzz.emu_net import PEER_CLOSED, WOULD_BLOCK
from snapfuzz.guest.engine import Context, Step, Target, TargetCrash

SITE_A = site_id("ftp:crash:A")
SITE_B = site_id("ftp:crash:B")
MAGIC_B = b"\xde\xad\xbe\xefSF42"

PAGE = 4096
# globals
G_PC, G_LISTENER, G_OPEN, G_CMDS, G_BANNER = 0, 4, 8, 12, 16
G_HANDLES = 64  # u32 per session slot, 0 = free
# session table
SESSIONS = 8
S_BASE, S_SIZE = PAGE, 1024
S_HANDLE, S_STATE, S_MODE, S_TYPE, S_LINELEN, S_NCMDS = 0, 4, 5, 6, 8, 12
S_USER, S_CWD, S_LINE = 16, 48, 128
LINE_MAX = 256
# file table written at boot
T_BASE, T_ENTRIES, T_SIZE = 16 * PAGE, 256, 128

NEED_USER, NEED_PASS, LOGGED_IN = 1, 2, 3

VERBS = (
    b"USER", b"PASS", b"QUIT", b"NOOP", b"SYST", b"MODE", b"TYPE",
    b"PWD", b"CWD", b"LIST", b"RETR", b"STAT", b"SITE", b"CRSH",
)
_CMP_SITES = {v: [site_id(f"ftp:cmp:{v.decode()}:{i}") for i in range(len(v))] for v in VERBS}
_S = {name: site_id(f"ftp:{name}") for name in (
    "boot", "accept", "full", "greet", "eof", "overflow", "unknown", "badseq", "noauth",
    "user", "pass", "pass:anon", "quit", "noop", "syst", "mode:ok", "mode:X", "mode:bad",
    "type:ok", "type:bad", "pwd", "cwd", "cwd:abs", "cwd:up", "list", "list:X", "retr:hit",
    "retr:miss", "stat", "site", "site:exec", "crsh:off", "idle",
)}


def _session(idx: int) -> int:
    return S_BASE + idx * S_SIZE


class FtpLike(Target):
    name = "ftp_like"
    num_pages = 64

    def step(self, ctx: Context) -> Step:
        if ctx.get(G_PC, 1) == 0:
            self._boot(ctx)
            return Step.CONTINUE
        net = ctx.net
        listener = ctx.get(G_LISTENER)
        raw = ctx.read(G_HANDLES, 4 * SESSIONS)
        live = [int.from_bytes(raw[i:i + 4], "little") for i in range(0, 4 * SESSIONS, 4)]
        handles = [listener] + [h for h in live if h]
        ready = net.readiness(handles)
        if not ready:
            ctx.edge(_S["idle"])
            return Step.BLOCK
        h = min(ready)
        if h == listener:
            self._accept(ctx, listener)
        else:
            self._serve(ctx, live.index(h), h)
        return Step.CONTINUE

    def _boot(self, ctx: Context) -> None:
        ctx.edge(_S["boot"])
        ctx.put(G_BANNER, ctx.rand() & 0xFFFF)
        for i in range(T_ENTRIES):
            name = f"file{i:03d}.txt".encode()
            size = ctx.rand() % 100000
            entry = name.ljust(32, b"\0") + size.to_bytes(4, "little") + bytes(T_SIZE - 36)
            ctx.write(T_BASE + i * T_SIZE, entry)
        ctx.put(G_LISTENER, ctx.net.listen("tcp:21"))
        ctx.put(G_PC, 1, 1)

    def _accept(self, ctx: Context, listener: int) -> None:
        h = ctx.net.accept(listener)
        if h is WOULD_BLOCK:
            return
        ctx.edge(_S["accept"])
        for i in range(SESSIONS):
            base = _session(i)
            if ctx.get(G_HANDLES + 4 * i) == 0:
                ctx.write(base, bytes(S_SIZE))
                ctx.put(G_HANDLES + 4 * i, h)
                ctx.put(base + S_HANDLE, h)
                ctx.put(base + S_STATE, NEED_USER, 1)
                ctx.put(base + S_MODE, ord("S"), 1)
                ctx.put(base + S_TYPE, ord("A"), 1)
                ctx.write(base + S_CWD, b"/")
                ctx.put(G_OPEN, ctx.get(G_OPEN) + 1)
                ctx.edge(_S["greet"])
                ctx.net.send(h, b"220 snapfuzz ftpd %d ready\r\n" % ctx.get(G_BANNER))
                return
        ctx.edge(_S["full"])
        ctx.net.send(h, b"421 Too many connections\r\n")
        ctx.net.close(h)

    def _close(self, ctx: Context, idx: int, h: int) -> None:
        ctx.net.close(h)
        ctx.put(_session(idx) + S_HANDLE, 0)
        ctx.put(G_HANDLES + 4 * idx, 0)
        ctx.put(G_OPEN, ctx.get(G_OPEN) - 1)

    def _serve(self, ctx: Context, idx: int, h: int) -> None:
        base = _session(idx)
        data = ctx.net.recv(h, LINE_MAX)
        if data is WOULD_BLOCK:
            return
        if data is PEER_CLOSED:
            ctx.edge(_S["eof"])
            self._close(ctx, idx, h)
            return
        linelen = ctx.get(base + S_LINELEN, 2)
        buf = ctx.read(base + S_LINE, linelen) + data
        while True:
            nl = buf.find(b"\n")
            if nl < 0:
                break
            line, buf = buf[:nl + 1], buf[nl + 1:]
            if not self._command(ctx, idx, h, line.rstrip(b"\r\n")):
                return  # session closed
        if len(buf) > LINE_MAX:
            ctx.edge(_S["overflow"])
            ctx.net.send(h, b"500 Line too long\r\n")
            buf = b""
        ctx.write(base + S_LINE, buf)
        ctx.put(base + S_LINELEN, len(buf), 2)

    def _reply(self, ctx: Context, h: int, label: str, msg: bytes) -> None:
        ctx.edge(_S[label])
        ctx.net.send(h, msg + b"\r\n")

    def _command(self, ctx: Context, idx: int, h: int, line: bytes) -> bool:
        base = _session(idx)
        ctx.put(G_CMDS, ctx.get(G_CMDS) + 1)
        ctx.put(base + S_NCMDS, ctx.get(base + S_NCMDS) + 1)
        verb, _, arg = line.partition(b" ")
        verb = verb.upper()
        # byte-wise comparisons so partial matches are visible as coverage
        match = None
        for v in VERBS:
            sites = _CMP_SITES[v]
            for i in range(min(len(v), len(verb))):
                if verb[i] != v[i]:
                    break
                ctx.edge(sites[i])
            else:
                if len(verb) == len(v):
                    match = v
        state = ctx.get(base + S_STATE, 1)
        if match is None:
            self._reply(ctx, h, "unknown", b"500 Unknown command")
            return True
        if match == b"USER":
            if state == LOGGED_IN:
                self._reply(ctx, h, "badseq", b"503 Already logged in")
            else:
                ctx.write(base + S_USER, arg[:31].ljust(32, b"\0"))
                ctx.put(base + S_STATE, NEED_PASS, 1)
                self._reply(ctx, h, "user", b"331 Password required")
            return True
        if match == b"PASS":
            if state != NEED_PASS:
                self._reply(ctx, h, "badseq", b"503 Login with USER first")
                return True
            ctx.put(base + S_STATE, LOGGED_IN, 1)
            if ctx.read(base + S_USER, 9) == b"anonymous" and b"@" in arg:
                ctx.edge(_S["pass:anon"])
            self._reply(ctx, h, "pass", b"230 Logged in")
            return True
        if match == b"QUIT":
            self._reply(ctx, h, "quit", b"221 Goodbye")
            self._close(ctx, idx, h)
            return False
        if match == b"NOOP":
            self._reply(ctx, h, "noop", b"200 NOOP ok")
            return True
        if match == b"SYST":
            self._reply(ctx, h, "syst", b"215 UNIX Type: L8")
            return True
        if state != LOGGED_IN:
            self._reply(ctx, h, "noauth", b"530 Not logged in")
            return True
        if match == b"MODE":
            m = arg[:1].upper()
            if m in (b"S", b"B", b"C"):
                ctx.put(base + S_MODE, m[0], 1)
                self._reply(ctx, h, "mode:ok", b"200 Mode set")
            elif m == b"X":
                ctx.put(base + S_MODE, m[0], 1)
                self._reply(ctx, h, "mode:X", b"200 Extended mode enabled")
            else:
                self._reply(ctx, h, "mode:bad", b"504 Mode not supported")
        elif match == b"TYPE":
            t = arg[:1].upper()
            if t in (b"A", b"I"):
                ctx.put(base + S_TYPE, t[0], 1)
                self._reply(ctx, h, "type:ok", b"200 Type set")
            else:
                self._reply(ctx, h, "type:bad", b"504 Type not supported")
        elif match == b"PWD":
            cwd = ctx.read(base + S_CWD, 64).split(b"\0", 1)[0]
            self._reply(ctx, h, "pwd", b'257 "' + cwd + b'"')
        elif match == b"CWD":
            if arg.startswith(b"/"):
                ctx.edge(_S["cwd:abs"])
            if b".." in arg:
                ctx.edge(_S["cwd:up"])
            ctx.write(base + S_CWD, arg[:63].ljust(64, b"\0"))
            self._reply(ctx, h, "cwd", b"250 Directory changed")
        elif match == b"LIST":
            count = 8 if ctx.get(base + S_MODE, 1) != ord("X") else 16
            if count == 16:
                ctx.edge(_S["list:X"])
            rows = [ctx.read(T_BASE + i * T_SIZE, 32).rstrip(b"\0") for i in range(count)]
            ctx.net.send(h, b"150 Listing\r\n" + b"\r\n".join(rows) + b"\r\n")
            self._reply(ctx, h, "list", b"226 Transfer complete")
        elif match == b"RETR":
            idx_arg = arg[4:7] if arg.startswith(b"file") else b""
            if idx_arg.isdigit() and int(idx_arg) < T_ENTRIES:
                size = ctx.get(T_BASE + int(idx_arg) * T_SIZE + 32)
                self._reply(ctx, h, "retr:hit", b"150 Opening data connection (%d bytes)" % size)
            else:
                self._reply(ctx, h, "retr:miss", b"550 File not found")
        elif match == b"STAT":
            self._reply(ctx, h, "stat", b"211 %d commands" % ctx.get(base + S_NCMDS))
        elif match == b"SITE":
            if arg[:8] == MAGIC_B:
                raise TargetCrash(SITE_B, "SITE magic")
            if arg.upper().startswith(b"EXEC"):
                ctx.edge(_S["site:exec"])
            self._reply(ctx, h, "site", b"500 SITE command not understood")
        elif match == b"CRSH":
            if ctx.get(base + S_MODE, 1) == ord("X"):
                # crash dump path writes past the session record in extended mode
                raise TargetCrash(SITE_A, "CRSH in MODE X")
            self._reply(ctx, h, "crsh:off", b"502 Command not implemented")
        return True
