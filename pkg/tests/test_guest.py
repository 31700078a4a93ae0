import random

import pytest
from conftest import session
from equivalence import from_root, mismatches

from snapfuzz.bytecode import BytecodeProgram, GraphBuilder, Op
from snapfuzz.coverage import CoverageMap
from snapfuzz.guest import BootError, Exit, Guest, Step, Target, TargetCrash, make_target
from snapfuzz.guest.ftp_like import MAGIC_B, SITE_A, SITE_B
from snapfuzz.guest.longprefix import handshake_packet
from snapfuzz.guest.platformer import (
    JUMP,
    RIGHT,
    LevelError,
    PlayerState,
    load_level,
    parse_level,
    physics_step,
    plan_route,
    seed_frames,
    simulate,
)
from snapfuzz.paged_state import PagedMemory, RootSnapshot, SnapshotError, root_create
from snapfuzz.seeds import ftp_session_seed, longprefix_seed, platformer_seed

CRASH_A = [b"USER a\r\n", b"PASS b\r\n", b"MODE X\r\n", b"CRSH\r\n"]


def test_boot_snapshot_before_input(spec):
    guest, root = Guest.boot(make_target("ftp_like"), spec)
    assert guest.ctx.net.packets_consumed == 0 and guest.ctx.net.bytes_consumed == 0
    assert guest.status == "awaiting-input"
    assert root.full_copy.tobytes() == guest.mem.data.tobytes()


@pytest.mark.parametrize("target", ["ftp_like", "longprefix", "platformer"])
def test_boot_is_deterministic(spec, target):
    _, a = Guest.boot(make_target(target), spec)
    _, b = Guest.boot(make_target(target), spec)
    assert a.full_copy.tobytes() == b.full_copy.tobytes()
    assert a.aux.blob == b.aux.blob


class CrashingInit(Target):
    name = "crashing_init"
    num_pages = 1

    def step(self, ctx):
        raise TargetCrash(1, "boom")


class NeverBlocks(Target):
    name = "never_blocks"
    num_pages = 1

    def step(self, ctx):
        return Step.CONTINUE


def test_boot_errors(spec):
    allocs = RootSnapshot.allocations
    with pytest.raises(BootError):
        Guest.boot(CrashingInit(), spec)
    with pytest.raises(BootError):
        Guest.boot(NeverBlocks(), spec, budget=100)
    assert RootSnapshot.allocations == allocs


def test_ftp_site_a(spec, ftp):
    res = ftp.execute(session(spec, CRASH_A), CoverageMap())
    assert res.exit is Exit.CRASH and res.crash_site == SITE_A
    # one command short, or out of order, is harmless
    assert ftp.execute(session(spec, CRASH_A[:3])).exit is Exit.FINISHED
    assert ftp.execute(session(spec, [CRASH_A[i] for i in (0, 2, 1, 3)])).exit is Exit.FINISHED


def test_ftp_site_b(spec, ftp):
    res = ftp.execute(session(spec, CRASH_A[:2] + [b"SITE " + MAGIC_B + b"\r\n"]))
    assert res.exit is Exit.CRASH and res.crash_site == SITE_B
    near = MAGIC_B[:7] + b"?"
    assert ftp.execute(session(spec, CRASH_A[:2] + [b"SITE " + near + b"\r\n"])).exit is Exit.FINISHED


def test_ftp_replies(spec, ftp):
    p = session(spec, [b"USER anonymous\r\n", b"PASS me@x\r\n", b"PWD\r\n", b"QUIT\r\n"])
    assert ftp.execute(p).exit is Exit.FINISHED
    net = ftp.ctx.net
    assert net.packets_consumed == 4


def test_ftp_bundled_seed_is_benign(spec, ftp):
    res = ftp.execute(ftp_session_seed(spec))
    assert res.exit is Exit.FINISHED
    assert res.packets_consumed == len(ftp_session_seed(spec).ops) - 1


def test_crash_replay_is_deterministic(spec, ftp):
    p = session(spec, CRASH_A)
    sites = {ftp.execute(p).crash_site for _ in range(100)}
    assert sites == {SITE_A}


def test_longprefix_packets_and_suffix(spec, longprefix):
    p = longprefix_seed(spec, 100, tuple([b"A1"] * 20))
    res = longprefix.execute(p)
    assert res.packets_consumed == 120
    k = 101  # con_open plus 100 handshake packets
    longprefix.execute(p.with_snapshot(k), create_incremental=True, stop_at_snapshot=True)
    res = longprefix.execute(p.with_snapshot(k), from_incremental=True)
    assert res.ops_executed == 20
    assert res.packets_consumed == 20 and res.packets_total == 120


def test_longprefix_suffix_branch_reached(spec, longprefix):
    good = longprefix_seed(spec, 100, (b"B",))
    bad = BytecodeProgram(good.ops[:50] + (Op(1, (0,), b"nope\r\n"),) + good.ops[51:])
    a, b = CoverageMap(), CoverageMap()
    longprefix.execute(good, a)
    longprefix.execute(bad, b)
    assert a.edges() > b.edges()
    assert handshake_packet(3) != handshake_packet(4)


def test_incremental_requires_matching_prefix(spec, ftp):
    p = session(spec, CRASH_A[:3], snapshot_after=2)
    with pytest.raises(SnapshotError):
        ftp.execute(p, from_incremental=True)
    ftp.execute(p, create_incremental=True, stop_at_snapshot=True)
    other = session(spec, [b"USER z\r\n"] + CRASH_A[1:3], snapshot_after=2)
    with pytest.raises(SnapshotError):
        ftp.execute(other, from_incremental=True)


@pytest.mark.parametrize("target", ["ftp_like", "longprefix", "platformer"])
def test_incremental_equivalence_six_packets(spec, target):
    guest, _ = Guest.boot(make_target(target, **({"prefix_len": 3} if target == "longprefix" else {})), spec)
    payloads = {
        "ftp_like": CRASH_A[:3] + [b"LIST\r\n", b"STAT\r\n", b"CRSH\r\n"],
        "longprefix": [handshake_packet(i) for i in range(3)] + [b"A1", b"BOK", b"C7"],
        "platformer": [bytes([RIGHT]), bytes([RIGHT | JUMP])] * 3,
    }[target]
    assert mismatches(guest, session(spec, payloads)) == []


def test_random_programs_equivalent(spec, ftp):
    rng = random.Random(5)
    verbs = [b"USER a", b"PASS b", b"MODE X", b"LIST", b"CRSH", b"QUIT", b"NOOP", b"SITE x"]
    for _ in range(20):
        b = GraphBuilder(spec)
        conns = [b.con_open()]
        for _ in range(rng.randint(1, 7)):
            if rng.random() < 0.2:
                conns.append(b.con_open())
            else:
                b.pkt(rng.choice(conns), rng.choice(verbs) + b"\r\n")
        assert mismatches(ftp, b.build()) == []


def shell_from(spec, mem_bytes, aux, geometry):
    mem = PagedMemory(*geometry)
    mem.write(0, mem_bytes)
    return Guest(make_target("ftp_like"), spec, root_create(mem, aux), mem)


def test_no_hidden_state(spec, ftp):
    ftp.execute(session(spec, CRASH_A[:2]))
    mem, aux = ftp.export_state()
    geometry = (ftp.mem.num_pages, ftp.mem.page_size)
    # only the connection slot is needed to address the live session
    tail = BytecodeProgram((Op(0),) + tuple(Op(1, (0,), line) for line in CRASH_A[2:]))
    a = shell_from(spec, mem, aux, geometry)
    b = shell_from(spec, mem, aux, geometry)
    ra, rb = a.execute(tail), b.execute(tail)
    assert ra == rb
    assert a.export_state()[0] == b.export_state()[0]
    assert a.export_state()[1].blob == b.export_state()[1].blob


def test_timeout(spec, longprefix):
    res = longprefix.execute(longprefix_seed(spec), op_budget=10)
    assert res.exit is Exit.TIMEOUT


def test_platformer_sanity_path(spec, platformer):
    level = load_level()
    frames = [RIGHT | JUMP] * 400
    outcome, _, _ = simulate(level, frames)
    assert outcome in ("dead", "won", "running")
    res = platformer.execute(session(spec, [bytes([b]) for b in frames]))
    assert res.exit is not Exit.CRASH
    # progress never goes backwards
    s, best = PlayerState.initial(level), 0
    for b in frames:
        s, ev = physics_step(s, b, level.tile, level.height)
        assert s.max_x >= best
        best = s.max_x
        if ev.died or ev.won:
            break


def test_platformer_route_and_seed(spec, platformer):
    level = load_level()
    route = plan_route(level)
    assert simulate(level, route)[0] == "won"
    frames = seed_frames(level)
    assert simulate(level, frames)[0] == "dead"
    res = platformer.execute(platformer_seed(spec))
    assert res.exit is Exit.FINISHED and not platformer.target.objective(platformer.ctx)
    won = platformer.execute(session(spec, [bytes([b]) for b in route]))
    assert won.exit is Exit.FINISHED and platformer.target.objective(platformer.ctx)


def test_unsolvable_level():
    level = parse_level("P" + "." * 40 + "F\n" + "###" + "." * 30 + "#" * 9 + "\n")
    with pytest.raises(LevelError):
        plan_route(level)
