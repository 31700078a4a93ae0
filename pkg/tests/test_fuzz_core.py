import csv
import random
from collections import Counter

import pytest

from snapfuzz.bytecode import program_parse
from snapfuzz.coverage import GlobalCoverage
from snapfuzz.fuzz_core import (
    STATS_HEADER,
    Campaign,
    CampaignConfig,
    CrashStore,
    EntryContext,
    FuzzStats,
    PolicyConfig,
    QueueEntry,
    Scheduler,
    choose_placement,
    fuzz_entry,
    report_crash,
    schedule_next,
)
from snapfuzz.guest import Exit, ExecResult, Guest, make_target
from snapfuzz.guest.ftp_like import SITE_A
from snapfuzz.guest.longprefix import LongPrefix
from snapfuzz.seeds import default_seeds, longprefix_seed
from conftest import session


def entry_with(n, **kw):
    e = QueueEntry(program=None, packet_positions=tuple(range(1, n + 1)), packet_count=n)
    for k, v in kw.items():
        setattr(e, k, v)
    return e


@pytest.mark.parametrize("kw", [
    {"policy": "sometimes"}, {"reuse_limit": 0}, {"balanced_root_prob": 1.5}, {"min_packets_for_inc": 1},
])
def test_policy_config_validation(kw):
    with pytest.raises(ValueError):
        PolicyConfig(**kw)


def test_short_inputs_use_root():
    rng = random.Random(0)
    for policy in ("balanced", "aggressive", "none"):
        for n in (1, 2, 3):
            assert all(choose_placement(PolicyConfig(policy), entry_with(n), rng) is None for _ in range(500))
    assert all(choose_placement(PolicyConfig("none"), entry_with(50), rng) is None for _ in range(500))


def test_balanced_distribution():
    rng = random.Random(1)
    cfg = PolicyConfig("balanced")
    draws = Counter(choose_placement(cfg, entry_with(10), rng) for _ in range(20_000))
    assert set(draws) <= {None, *range(1, 10)}
    assert abs(draws[None] / 20_000 - 0.04) < 0.01
    # the second half [5, 9] gets the "second half" draws plus its share of the "whole" draws
    upper = sum(draws[k] for k in range(5, 10)) / 20_000
    assert abs(upper - 0.96 * (0.5 + 0.5 * 5 / 9)) < 0.02


def test_aggressive_cursor_cycle():
    cfg = PolicyConfig("aggressive", reuse_limit=50)
    e = entry_with(5)
    seq = []
    for _ in range(9):
        seq.append(choose_placement(cfg, e, random.Random(0)))
        e.iters_since_new = cfg.reuse_limit  # forced stall
    assert seq == [4, 3, 2, 1, 4, 3, 2, 1, 4]


def test_aggressive_holds_while_finding():
    cfg = PolicyConfig("aggressive")
    e = entry_with(6)
    assert choose_placement(cfg, e, random.Random(0)) == 5
    e.iters_since_new = 10
    assert choose_placement(cfg, e, random.Random(0)) == 5


def test_unstable_entry_uses_root():
    assert choose_placement(PolicyConfig("aggressive"), entry_with(8, unstable=True), random.Random(0)) is None


def test_schedule_single_and_starvation():
    rng = random.Random(2)
    only = entry_with(4)
    assert all(schedule_next([only], rng) is only for _ in range(100))
    queue = [entry_with(4, exec_cost=float(10 ** i), fresh=False) for i in range(10)]
    sched = Scheduler()
    picked = Counter(id(schedule_next(queue, rng, sched)) for _ in range(10_000))
    assert all(picked[id(e)] >= 1 for e in queue)


def test_fresh_entries_weighted_up():
    rng = random.Random(3)
    fresh, stale = entry_with(4, fresh=True, exec_cost=5.0), entry_with(4, fresh=False, exec_cost=5.0)
    picks = Counter(schedule_next([fresh, stale], rng) is fresh for _ in range(10_000))
    assert picks[True] > picks[False]


def test_schedule_empty():
    with pytest.raises(ValueError):
        schedule_next([], random.Random(0))


def crash_result(site=SITE_A):
    return ExecResult(Exit.CRASH, 4, 4, 20, site)


def test_report_crash_dedup(spec, ftp, tmp_path):
    store = CrashStore(tmp_path)
    a = session(spec, [b"USER a\r\n", b"PASS b\r\n", b"MODE X\r\n", b"CRSH\r\n"])
    b = session(spec, [b"USER q\r\n", b"PASS q\r\n", b"MODE x\r\n", b"CRSH now\r\n"])
    cid = report_crash(a, crash_result(), store, "ftp_like", ftp.execute)
    assert cid == "ftp_like-%04x" % SITE_A
    assert report_crash(b, crash_result(), store, "ftp_like", ftp.execute) is None
    rec = store.records[("ftp_like", SITE_A)]
    assert store.unique == 1 and len(rec.reproducers) == 2 and rec.hits == 2
    for path in rec.reproducers:
        p = program_parse(spec, open(path, "rb").read())
        assert [ftp.execute(p).crash_site for _ in range(3)] == [SITE_A] * 3


def test_reproducer_cap(spec, ftp):
    store = CrashStore(None, max_reproducers=2)
    a = session(spec, [b"USER a\r\n", b"PASS b\r\n", b"MODE X\r\n", b"CRSH\r\n"])
    for _ in range(5):
        report_crash(a, crash_result(), store, "ftp_like", ftp.execute)
    rec = store.records[("ftp_like", SITE_A)]
    assert len(rec.reproducers) == 2 and rec.hits == 5


def test_flaky_crash_quarantined(spec, tmp_path):
    store = CrashStore(tmp_path)
    outcomes = iter([crash_result(), ExecResult(Exit.FINISHED, 4, 4, 20), crash_result()])
    p = session(spec, [b"x\r\n"])
    assert report_crash(p, crash_result(), store, "ftp_like", lambda _: next(outcomes)) is None
    assert store.unique == 0 and len(store.quarantined) == 1
    assert list((tmp_path / "crashes" / "quarantine").glob("*.nxb"))
    with pytest.raises(ValueError):
        report_crash(p, ExecResult(Exit.FINISHED, 1, 1, 1), store, "ftp_like", lambda _: None)


def make_ctx(guest):
    return EntryContext(guest, GlobalCoverage(), FuzzStats(), [])


def calibrated(guest, program):
    return QueueEntry.from_run(guest.spec, program, guest.execute(program))


def test_fuzz_entry_stats(spec):
    guest, _ = Guest.boot(LongPrefix(prefix_len=8), spec)
    entry = calibrated(guest, longprefix_seed(spec, 8, (b"A1", b"BO", b"C")))
    assert entry.packet_count == 11
    ec = make_ctx(guest)
    cfg = PolicyConfig("aggressive", reuse_limit=20)
    rng = random.Random(4)
    skipped = 0
    for _ in range(15):
        fuzz_entry(entry, cfg, rng, ec)
        skipped += entry.aggressive_cursor * cfg.reuse_limit
    s = ec.stats
    assert s.execs == 15 * cfg.reuse_limit == s.inc_reuses
    assert s.inc_snapshots_created == s.prefix_runs == 15
    assert s.packets_skipped == skipped
    assert guest.inc is None


def test_novelty_resets_stall_counter(spec):
    guest, _ = Guest.boot(LongPrefix(prefix_len=4), spec)
    entry = calibrated(guest, longprefix_seed(spec, 4, (b"A",)))
    entry.iters_since_new = 40
    findings = fuzz_entry(entry, PolicyConfig("balanced", reuse_limit=50), random.Random(0), make_ctx(guest))
    assert any(f.kind == "novel" for f in findings)
    assert entry.iters_since_new < 50 and entry.fresh


def test_findings_reproduce_from_root(spec, ftp):
    seed = default_seeds("ftp_like", spec)[0]
    entry = calibrated(ftp, seed)
    ec = make_ctx(ftp)
    rng = random.Random(7)
    findings = []
    for _ in range(6):
        findings += fuzz_entry(entry, PolicyConfig("aggressive", reuse_limit=30), rng, ec)
    assert findings and ec.stats.inc_reuses > 0
    for f in findings:
        assert f.program.snapshot_index is None
        res = ftp.execute(f.program)
        assert (res.exit, res.crash_site, res.packets_total) == (f.result.exit, f.result.crash_site, f.result.packets_total)


class Drifting(LongPrefix):
    """Handshake log records a counter that lives outside the snapshot."""

    calls = 0

    def _handshake(self, ctx, conn, hs, data):
        Drifting.calls += 1
        ctx.put(3000, Drifting.calls)
        return super()._handshake(ctx, conn, hs, data)


def test_divergent_prefix_marks_entry_unstable(spec):
    guest, _ = Guest.boot(Drifting(prefix_len=6), spec)
    entry = calibrated(guest, longprefix_seed(spec, 6, (b"A", b"B")))
    ec = make_ctx(guest)
    cfg = PolicyConfig("aggressive", reuse_limit=5)
    for _ in range(2):
        entry.aggressive_cursor, entry.iters_since_new = 5, 0
        fuzz_entry(entry, cfg, random.Random(0), ec)
    assert entry.unstable
    created = ec.stats.inc_snapshots_created
    fuzz_entry(entry, cfg, random.Random(0), ec)
    assert ec.stats.inc_snapshots_created == created


def run_campaign(spec, tmp_path, name, **kw):
    kw.setdefault("policy", PolicyConfig("balanced"))
    cfg = CampaignConfig(out_dir=tmp_path / name, clock="virtual", **kw)
    c = Campaign(cfg, spec, default_seeds(cfg.target, spec, **cfg.target_options))
    c.run()
    return c


def test_campaign_layout(spec, tmp_path):
    c = run_campaign(spec, tmp_path, "a", target="ftp_like", duration=3.0)
    out = tmp_path / "a"
    assert {p.name for p in out.iterdir()} >= {"queue", "crashes", "stats.csv", "global_cov.bin", "config.txt"}
    rows = list(csv.reader(open(out / "stats.csv")))
    assert tuple(rows[0]) == STATS_HEADER
    assert len(rows) >= 4
    assert "policy=balanced" in (out / "config.txt").read_text()
    assert len(list((out / "queue").glob("*.nxb"))) == len(c.corpus_names)
    assert GlobalCoverage.from_bytes((out / "global_cov.bin").read_bytes()).edges_found() == c.edges_found()


def test_virtual_clock_is_reproducible(spec, tmp_path):
    a = run_campaign(spec, tmp_path, "a", target="ftp_like", duration=3.0, rng_seed=11)
    b = run_campaign(spec, tmp_path, "b", target="ftp_like", duration=3.0, rng_seed=11)
    assert (tmp_path / "a" / "stats.csv").read_bytes() == (tmp_path / "b" / "stats.csv").read_bytes()
    assert sorted(a.corpus_names) == sorted(b.corpus_names)


def test_policy_none_never_snapshots(spec, tmp_path):
    c = run_campaign(spec, tmp_path, "n", target="longprefix", policy=PolicyConfig("none"), duration=2.0,
                     target_options={"prefix_len": 10})
    assert c.stats.execs > 0
    assert c.stats.inc_snapshots_created == 0 and c.stats.packets_skipped == 0
    assert all(w.guest.inc_created == 0 for w in c.workers)


def test_workers_share_root(spec, tmp_path):
    import snapfuzz.paged_state as ps

    before = ps.RootSnapshot.allocations
    c = run_campaign(spec, tmp_path, "w", target="ftp_like", workers=3, duration=1.0)
    assert ps.RootSnapshot.allocations - before == 1
    assert len({id(w.guest.root) for w in c.workers}) == 1
    assert len({id(w.guest.mem) for w in c.workers}) == 3


def test_sync_imports_other_workers_queue(spec, tmp_path):
    c = run_campaign(spec, tmp_path, "s", target="ftp_like", workers=2, duration=31.0, sync_interval=30.0)
    names = [w.known_files for w in c.workers]
    on_disk = {p.name for p in (tmp_path / "s" / "queue").glob("*.nxb")}
    # after a sync every worker has seen every file that existed at that time
    assert names[0] & names[1]
    assert names[0] <= on_disk and names[1] <= on_disk


def test_campaign_needs_seeds(spec):
    with pytest.raises(ValueError):
        Campaign(CampaignConfig(), spec, [])
