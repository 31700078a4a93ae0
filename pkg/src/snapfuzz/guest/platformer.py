"""Deterministic side-scroller: one packet is one frame of buttons.

Level files are plain text grids: ``#`` solid, ``.`` empty, ``F`` flag,
``P`` start. Falling out of the bottom of the map kills the player. The
furthest x reached is reported through the coverage map's feedback slots,
bucketed into 64 steps across the level width.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import NamedTuple

from snapfuzz.coverage import FEEDBACK_SLOTS, site_id
from snapfuzz.emu_net import PEER_CLOSED, WOULD_BLOCK
from snapfuzz.guest.engine import Context, Step, Target

LEFT, RIGHT, JUMP = 1, 2, 4

SUB = 16  # subunits per tile
WALK = 8
JUMP_VELOCITY = 10
GRAVITY = 2
MAX_FALL = 12
HALF_WIDTH = 4

PAGE = 4096
G_PC, G_LISTENER, G_CONN, G_WON = 0, 4, 8, 12
ST_BASE = 64  # PlayerState, 8 x int32
GRID_BASE = PAGE

_S = {name: site_id(f"platformer:{name}") for name in (
    "accept", "jump", "land", "bump", "die", "flag", "eof", "idle",
)}


class LevelError(ValueError):
    pass


@dataclass(frozen=True)
class Level:
    rows: tuple[bytes, ...]
    start: tuple[int, int]

    @property
    def width(self) -> int:
        return len(self.rows[0])

    @property
    def height(self) -> int:
        return len(self.rows)

    def tile(self, col: int, row: int) -> int:
        if col < 0 or col >= self.width:
            return ord("#")  # level edges are walls
        if row < 0 or row >= self.height:
            return ord(".")
        return self.rows[row][col]


def parse_level(text: str) -> Level:
    lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip() and not ln.startswith(";")]
    if not lines:
        raise LevelError("empty level")
    width = max(len(ln) for ln in lines)
    rows = []
    start = None
    for r, ln in enumerate(lines):
        ln = ln.ljust(width, ".")
        bad = set(ln) - set("#.FP")
        if bad:
            raise LevelError(f"row {r}: unknown tile(s) {''.join(sorted(bad))!r}")
        if "P" in ln:
            if start is not None or ln.count("P") > 1:
                raise LevelError("more than one start tile")
            start = (ln.index("P"), r)
            ln = ln.replace("P", ".")
        rows.append(ln.encode())
    if start is None:
        raise LevelError("level has no start tile 'P'")
    if not any(b"F" in row for row in rows):
        raise LevelError("level has no flag 'F'")
    return Level(tuple(rows), start)


def load_level(name: str = "level1.txt") -> Level:
    return parse_level(resources.files("snapfuzz.data").joinpath(name).read_text())


class PlayerState(NamedTuple):
    x: int
    y: int  # feet; the body spans [y - SUB, y)
    vx: int
    vy: int
    on_ground: int
    alive: int
    frame: int
    max_x: int

    @classmethod
    def initial(cls, level: Level) -> PlayerState:
        col, row = level.start
        x = col * SUB + SUB // 2
        return cls(x, (row + 1) * SUB, 0, 0, 0, 1, 0, x)


class Events(NamedTuple):
    jumped: bool = False
    landed: bool = False
    bumped: bool = False
    died: bool = False
    won: bool = False


def _solid(tile_at, x0: int, x1: int, row: int) -> bool:
    for col in range(x0 // SUB, x1 // SUB + 1):
        if tile_at(col, row) == 35:  # '#'
            return True
    return False


def physics_step(s: PlayerState, buttons: int, tile_at, height: int) -> tuple[PlayerState, Events]:
    """Advance one frame. ``tile_at(col, row)`` returns the tile byte."""
    x, y, vx, vy, on_ground, alive, frame, max_x = s
    jumped = landed = bumped = False
    left, right = buttons & LEFT, buttons & RIGHT
    if on_ground:
        vx = WALK if right and not left else -WALK if left and not right else 0
    # airborne: no air control, the take-off velocity is kept
    if buttons & JUMP and on_ground:
        vy = -JUMP_VELOCITY
        jumped = True
    vy = min(vy + GRAVITY, MAX_FALL)

    nx = x + vx
    top_row, feet_row = (y - SUB) // SUB, (y - 1) // SUB
    edge = nx + HALF_WIDTH - 1 if vx > 0 else nx - HALF_WIDTH
    if vx and any(tile_at(edge // SUB, r) == 35 for r in range(top_row, feet_row + 1)):
        nx, vx = x, 0
    x = nx

    ny = y + vy
    if vy > 0:
        for row in range((y - 1) // SUB + 1, (ny - 1) // SUB + 1):
            if _solid(tile_at, x - HALF_WIDTH, x + HALF_WIDTH - 1, row):
                ny, vy = row * SUB, 0
                landed = not on_ground
                break
    elif vy < 0:
        for row in range((y - SUB) // SUB - 1, (ny - SUB) // SUB - 1, -1):
            if _solid(tile_at, x - HALF_WIDTH, x + HALF_WIDTH - 1, row):
                ny, vy = (row + 1) * SUB + SUB, 0
                bumped = True
                break
    y = ny
    on_ground = int(y % SUB == 0 and _solid(tile_at, x - HALF_WIDTH, x + HALF_WIDTH - 1, y // SUB))
    max_x = max(max_x, x)
    died = y - SUB >= height * SUB
    won = False
    if not died:
        for row in range((y - SUB) // SUB, (y - 1) // SUB + 1):
            for col in range((x - HALF_WIDTH) // SUB, (x + HALF_WIDTH - 1) // SUB + 1):
                if tile_at(col, row) == 70:  # 'F'
                    won = True
    if died:
        alive = 0
    return PlayerState(x, y, vx, vy, on_ground, alive, frame + 1, max_x), Events(jumped, landed, bumped, died, won)


def simulate(level: Level, frames) -> tuple[str, int, PlayerState]:
    """Pure replay used for seed planning: returns (outcome, frames used, final state)."""
    s = PlayerState.initial(level)
    for i, b in enumerate(frames):
        s, ev = physics_step(s, b, level.tile, level.height)
        if ev.died:
            return "dead", i + 1, s
        if ev.won:
            return "won", i + 1, s
    return "running", len(frames), s


class Platformer(Target):
    name = "platformer"

    def __init__(self, level: Level | None = None):
        self.level = level or load_level()
        grid = self.level.width * self.level.height
        self.num_pages = 1 + -(-grid // PAGE) + 1

    def _tile_reader(self, ctx: Context):
        w, h = self.level.width, self.level.height
        grid = ctx.read(GRID_BASE, w * h)

        def tile_at(col: int, row: int) -> int:
            if col < 0 or col >= w:
                return 35
            if row < 0 or row >= h:
                return 46
            return grid[row * w + col]

        return tile_at

    def step(self, ctx: Context) -> Step:
        pc = ctx.get(G_PC, 1)
        if pc == 0:
            ctx.write(GRID_BASE, b"".join(self.level.rows))
            ctx.write(ST_BASE, _pack(PlayerState.initial(self.level)))
            ctx.put(G_LISTENER, ctx.net.listen("udp:9000"))
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
        data = ctx.net.recv(ctx.get(G_CONN), 16)
        if data is WOULD_BLOCK:
            return Step.BLOCK
        if data is PEER_CLOSED:
            ctx.edge(_S["eof"])
            return Step.DONE
        state = _unpack(ctx.read(ST_BASE, 32))
        state, ev = physics_step(state, data[0], self._tile_reader(ctx), self.level.height)
        ctx.write(ST_BASE, _pack(state))
        ctx.feedback(state.max_x * FEEDBACK_SLOTS // (self.level.width * SUB))
        if ev.jumped:
            ctx.edge(_S["jump"])
        if ev.landed:
            ctx.edge(_S["land"])
        if ev.bumped:
            ctx.edge(_S["bump"])
        if ev.died:
            ctx.edge(_S["die"])
            return Step.DONE
        if ev.won:
            ctx.edge(_S["flag"])
            ctx.put(G_WON, 1, 1)
            ctx.net.send(ctx.get(G_CONN), b"WIN frame=%d\n" % state.frame)
            return Step.DONE
        return Step.CONTINUE

    def objective(self, ctx: Context) -> bool:
        return ctx.get(G_WON, 1) == 1


def _pack(s: PlayerState) -> bytes:
    return b"".join((v & 0xFFFFFFFF).to_bytes(4, "little") for v in s)


def _unpack(raw: bytes) -> PlayerState:
    vals = []
    for i in range(0, 32, 4):
        v = int.from_bytes(raw[i:i + 4], "little")
        vals.append(v - (1 << 32) if v & 0x80000000 else v)
    return PlayerState(*vals)


def plan_route(level: Level, max_frames: int = 2000) -> list[int]:
    """Shortest button sequence that reaches the flag, by breadth-first search over
    walk-right / jump-right. Used to build seeds; raises if the level is unsolvable."""
    layer = {PlayerState.initial(level)[:5]: []}
    for _ in range(max_frames):
        nxt: dict = {}
        for key, path in layer.items():
            s = PlayerState(*key, 1, len(path), 0)
            for b in (RIGHT, RIGHT | JUMP):
                if b & JUMP and not s.on_ground:
                    continue
                ns, ev = physics_step(s, b, level.tile, level.height)
                if ev.died:
                    continue
                if ev.won:
                    return path + [b]
                nk = ns[:5]
                if nk not in nxt:
                    nxt[nk] = path + [b]
        if not nxt:
            break
        layer = nxt
    raise LevelError("no route to the flag found")


def seed_frames(level: Level) -> list[int]:
    """A run that follows the planned route but never takes its last jump, walking
    into the final gap instead. Every gap but the last is handled; the missing
    jump is left to the fuzzer."""
    route = plan_route(level)
    last_jump = max(i for i, b in enumerate(route) if b & JUMP)
    frames = route[:last_jump] + [RIGHT] * (4 * level.height * SUB)
    outcome, used, _ = simulate(level, frames)
    if outcome != "dead":
        raise LevelError("walking past the last jump point does not fail; nothing left to find")
    return frames[:used]
