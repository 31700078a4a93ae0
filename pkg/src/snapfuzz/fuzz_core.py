"""Campaign loop: queue, snapshot placement, incremental reuse, crashes, stats.

A campaign runs N workers round-robin in one process. Workers share the
root snapshot and the campaign directory and nothing else; corpora are
exchanged by rescanning ``queue/`` every ``sync_interval`` seconds.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import random
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

from snapfuzz.bytecode import BytecodeProgram, FormatSpec, ProgramError, program_parse
from snapfuzz.coverage import MAP_SIZE, CoverageMap, GlobalCoverage, Novelty, cov_merge_and_classify
from snapfuzz.guest import DEFAULT_OP_BUDGET, ExecResult, Exit, Guest, make_target
from snapfuzz.mutate import MutatorConfig, mutate
from snapfuzz.paged_state import REMIRROR_INTERVAL, IncrementalSnapshot, RootSnapshot

log = logging.getLogger(__name__)

POLICIES = ("none", "balanced", "aggressive")
STATS_HEADER = (
    "unix_ts", "execs", "execs_per_sec", "edges_found", "corpus_size", "crashes_unique",
    "inc_snapshots_created", "inc_reuses", "packets_skipped",
)
CRASH_REPLAYS = 3


@dataclass
class PolicyConfig:
    policy: str = "balanced"
    reuse_limit: int = 50
    min_packets_for_inc: int = 4
    balanced_root_prob: float = 0.04
    balanced_second_half_prob: float = 0.5

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if self.reuse_limit < 1:
            raise ValueError("reuse_limit must be >= 1")
        if self.min_packets_for_inc < 2:
            raise ValueError("min_packets_for_inc must be >= 2")
        for name in ("balanced_root_prob", "balanced_second_half_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


@dataclass(eq=False)
class QueueEntry:
    program: BytecodeProgram
    packet_positions: tuple[int, ...]
    packet_count: int  # packets the target consumed on the calibration run
    name: str = ""
    exec_cost: float = 0.0
    aggressive_cursor: int | None = None
    iters_since_new: int = 0
    times_scheduled: int = 0
    fresh: bool = True
    unstable: bool = False
    prefix_prints: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    @classmethod
    def from_run(cls, spec: FormatSpec, program: BytecodeProgram, result: ExecResult, name: str = "") -> QueueEntry:
        program = program.stripped()
        positions = tuple(program.packet_positions(spec))
        consumed = min(len(positions), result.packets_total)
        return cls(program, positions, max(1, consumed), name, exec_cost=float(result.ops_executed))

    def op_index(self, k: int) -> int:
        """Op index of the snapshot marker that leaves ``k`` packets in the prefix."""
        return self.packet_positions[k - 1] + 1


def choose_placement(cfg: PolicyConfig, entry: QueueEntry, rng: random.Random) -> int | None:
    """Packet index for the incremental snapshot, or None for the root."""
    n = entry.packet_count
    if cfg.policy == "none" or n < cfg.min_packets_for_inc or entry.unstable:
        return None
    if cfg.policy == "balanced":
        if rng.random() < cfg.balanced_root_prob:
            return None
        if rng.random() < cfg.balanced_second_half_prob:
            return rng.randint(math.ceil(n / 2), n - 1)
        return rng.randint(1, n - 1)
    # aggressive: start at the end of the input, step back one packet per stall
    if entry.aggressive_cursor is None or not 1 <= entry.aggressive_cursor <= n - 1:
        entry.aggressive_cursor = n - 1
    elif entry.iters_since_new >= cfg.reuse_limit:
        entry.aggressive_cursor = entry.aggressive_cursor - 1 if entry.aggressive_cursor > 1 else n - 1
        entry.iters_since_new = 0
    return entry.aggressive_cursor


# ---- scheduling --------------------------------------------------------------

@dataclass
class Scheduler:
    rr_every: int = 8
    picks: int = 0
    rr_next: int = 0


def entry_weight(entry: QueueEntry, mean_cost: float) -> float:
    speed = mean_cost / max(entry.exec_cost, 1.0) if mean_cost > 0 else 1.0
    return (4.0 if entry.fresh else 1.0) * min(max(speed, 0.25), 4.0)


def schedule_next(queue: list[QueueEntry], rng: random.Random, sched: Scheduler | None = None) -> QueueEntry:
    """Weighted pick favouring fresh and cheap entries; every ``rr_every``-th pick is round-robin."""
    if not queue:
        raise ValueError("queue is empty")
    if sched is not None:
        sched.picks += 1
        if sched.picks % sched.rr_every == 0:
            entry = queue[sched.rr_next % len(queue)]
            sched.rr_next += 1
            return entry
    mean_cost = sum(e.exec_cost for e in queue) / len(queue)
    return rng.choices(queue, [entry_weight(e, mean_cost) for e in queue])[0]


# ---- crashes -----------------------------------------------------------------

@dataclass
class CrashRecord:
    crash_id: str
    target: str
    site: int
    hits: int = 0
    reproducers: list[str] = field(default_factory=list)


class CrashStore:
    def __init__(self, out_dir: Path | None = None, max_reproducers: int = 8):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.max_reproducers = max_reproducers
        self.records: dict[tuple[str, int], CrashRecord] = {}
        self.quarantined: list[tuple[str, int, BytecodeProgram]] = []
        self._seq = 0

    @property
    def unique(self) -> int:
        return len(self.records)

    def _write(self, sub: str, name: str, data: bytes) -> str:
        if self.out_dir is None:
            return f"{sub}/{name}"
        path = self.out_dir / sub / name
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, data)
        return str(path)


def report_crash(
    program: BytecodeProgram,
    result: ExecResult,
    store: CrashStore,
    target: str,
    replay: Callable[[BytecodeProgram], ExecResult],
) -> str | None:
    """File a crash after it reproduces ``CRASH_REPLAYS`` times from the root.

    Returns the crash id for a new crash, None for a duplicate or a flaky one.
    """
    if result.exit is not Exit.CRASH:
        raise ValueError("report_crash needs a crashing result")
    program = program.stripped()
    key = (target, result.crash_site)
    rec = store.records.get(key)
    if rec is not None:
        rec.hits += 1
        if len(rec.reproducers) >= store.max_reproducers:
            return None
    runs = [replay(program) for _ in range(CRASH_REPLAYS)]
    if not all(r.exit is Exit.CRASH and r.crash_site == result.crash_site for r in runs):
        store._seq += 1
        store._write("crashes/quarantine", f"{target}-{result.crash_site:04x}-{store._seq:06d}.nxb", program.serialize())
        store.quarantined.append((target, result.crash_site, program))
        log.warning("crash at site %#06x did not reproduce; quarantined", result.crash_site)
        return None
    new = rec is None
    if new:
        rec = CrashRecord(f"{target}-{result.crash_site:04x}", target, result.crash_site, hits=1)
        store.records[key] = rec
        log.info("new crash %s", rec.crash_id)
    store._seq += 1
    rec.reproducers.append(
        store._write(f"crashes/{rec.crash_id}", f"id-{store._seq:06d}.nxb", program.serialize())
    )
    return rec.crash_id if new else None


# ---- one entry ---------------------------------------------------------------

@dataclass
class FuzzStats:
    execs: int = 0  # test cases run
    prefix_runs: int = 0  # runs that only build an incremental snapshot
    ops: int = 0  # ops executed, prefix runs included
    root_equivalent_ops: int = 0  # what the same test cases would have cost run from the root
    inc_snapshots_created: int = 0
    inc_reuses: int = 0
    packets_skipped: int = 0
    objective_at: int | None = None  # guest runs (execs + prefix runs) until the objective was first met

    @property
    def runs(self) -> int:
        return self.execs + self.prefix_runs


class Finding(NamedTuple):
    kind: str  # "novel" | "crash" | "objective"
    program: BytecodeProgram
    result: ExecResult
    novelty: Novelty = Novelty.NONE


@dataclass
class EntryContext:
    """Per-worker pieces that :func:`fuzz_entry` needs besides the entry itself."""

    guest: Guest
    glob: GlobalCoverage
    stats: FuzzStats
    corpus: list[BytecodeProgram]
    mut_cfg: MutatorConfig = field(default_factory=MutatorConfig)
    op_budget: int = DEFAULT_OP_BUDGET
    map_size: int = MAP_SIZE
    on_exec: Callable[[Finding | None], bool] | None = None  # return True to stop


def _prefix_print(cov: CoverageMap, inc: IncrementalSnapshot) -> tuple[int, int, int]:
    pages = inc._delta
    mem = zlib.crc32(pages.tobytes())
    if pages.size:
        mem = zlib.crc32(inc._private[inc.slot_of_page[pages]].tobytes(), mem)
    return cov.digest(), zlib.crc32(inc.aux.blob), mem


def _run_prefix(entry: QueueEntry, k: int, ec: EntryContext) -> tuple[int, CoverageMap] | None:
    """Run ops up to the snapshot point from the root and take the incremental snapshot."""
    guest, stats = ec.guest, ec.stats
    op_k = entry.op_index(k)
    cov = CoverageMap(ec.map_size)
    res = guest.execute(
        entry.program.with_snapshot(op_k), cov,
        create_incremental=True, stop_at_snapshot=True, op_budget=ec.op_budget,
    )
    stats.prefix_runs += 1
    stats.ops += res.ops_executed
    if not res.snapshot_created:
        return None  # target stopped before the snapshot point
    stats.inc_snapshots_created += 1
    fp = _prefix_print(cov, guest.inc)
    known = entry.prefix_prints.setdefault(op_k, fp)
    if known != fp:
        log.warning("entry %s: prefix at op %d diverged, using the root from now on", entry.name, op_k)
        entry.unstable = True
        guest.discard_incremental()
        return None
    return op_k, cov


def fuzz_entry(entry: QueueEntry, cfg: PolicyConfig, rng: random.Random, ec: EntryContext) -> list[Finding]:
    """Run ``cfg.reuse_limit`` mutants of ``entry`` from the placement the policy picks."""
    guest, stats = ec.guest, ec.stats
    entry.times_scheduled += 1
    k = choose_placement(cfg, entry, rng)
    prefix = _run_prefix(entry, k, ec) if k is not None else None
    if prefix is None:
        k, op_k, prefix_cov = None, 0, None
        base = entry.program
    else:
        op_k, prefix_cov = prefix
        base = entry.program.with_snapshot(op_k)
    findings: list[Finding] = []
    found = False
    cov = CoverageMap(ec.map_size)
    try:
        for _ in range(cfg.reuse_limit):
            mutant = mutate(guest.spec, base, rng, ec.corpus, fuzz_from=op_k, cfg=ec.mut_cfg)
            if prefix_cov is not None:
                mutant = mutant.with_snapshot(op_k)
                cov.assign(prefix_cov)
                res = guest.execute(mutant, cov, from_incremental=True, op_budget=ec.op_budget)
                stats.inc_reuses += 1
                stats.packets_skipped += k
            else:
                res = guest.execute(mutant, cov, op_budget=ec.op_budget)
            stats.execs += 1
            stats.ops += res.ops_executed
            stats.root_equivalent_ops += res.ops_executed + op_k
            entry.exec_cost = 0.8 * entry.exec_cost + 0.2 * res.ops_executed
            finding = None
            if res.exit is Exit.CRASH:
                cov.clear()
                finding = Finding("crash", mutant.stripped(), res)
            elif guest.target.objective(guest.ctx):
                cov_merge_and_classify(cov, ec.glob)
                if stats.objective_at is None:
                    stats.objective_at = stats.runs
                finding = Finding("objective", mutant.stripped(), res)
            elif res.exit is Exit.TIMEOUT:
                cov.clear()
            else:
                novelty = cov_merge_and_classify(cov, ec.glob)
                if novelty:
                    finding = Finding("novel", mutant.stripped(), res, novelty)
            if finding is not None:
                findings.append(finding)
                if finding.kind != "crash":
                    entry.iters_since_new = 0
                    found = True
                else:
                    entry.iters_since_new += 1
            else:
                entry.iters_since_new += 1
            if ec.on_exec is not None and ec.on_exec(finding):
                break
    finally:
        guest.discard_incremental()
    entry.fresh = found
    return findings


# ---- campaign ----------------------------------------------------------------

@dataclass
class CampaignConfig:
    target: str = "ftp_like"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    workers: int = 1
    duration: float = 60.0
    max_execs: int | None = None
    out_dir: Path | None = None
    rng_seed: int = 0
    op_budget: int = DEFAULT_OP_BUDGET
    map_size: int = MAP_SIZE
    remirror_interval: int = REMIRROR_INTERVAL
    clock: str = "wall"  # or "virtual": 1 exec advances time by exec_ms
    exec_ms: float = 1.0
    sync_interval: float = 30.0
    stop_on_crash: bool = False
    stop_on_site: int | None = None
    stop_on_objective: bool = False
    target_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.clock not in ("wall", "virtual"):
            raise ValueError("clock must be 'wall' or 'virtual'")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    def flat(self) -> dict:
        d = asdict(self)
        d.update(d.pop("policy"))
        d["out_dir"] = str(self.out_dir) if self.out_dir is not None else ""
        return d


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class Worker:
    def __init__(self, idx: int, campaign: Campaign, guest: Guest):
        self.idx = idx
        self.campaign = campaign
        self.guest = guest
        cfg = campaign.cfg
        self.rng = random.Random(cfg.rng_seed * 1_000_003 + idx)
        self.queue: list[QueueEntry] = []
        self.glob = GlobalCoverage(cfg.map_size)
        self.known_files: set[str] = set()
        self.sched = Scheduler()
        guest._inc_recycle = IncrementalSnapshot(guest.root, remirror_interval=cfg.remirror_interval)
        self.ec = EntryContext(
            guest, self.glob, campaign.stats, [], op_budget=cfg.op_budget, map_size=cfg.map_size,
            on_exec=campaign.on_exec,
        )

    def calibrate(self, program: BytecodeProgram, force: bool = False, name: str = "") -> QueueEntry | None:
        """Run ``program`` from the root and queue it if it adds coverage (or if ``force``)."""
        program = program.stripped()
        cov = CoverageMap(self.campaign.cfg.map_size)
        res = self.guest.execute(program, cov, op_budget=self.campaign.cfg.op_budget)
        if res.exit is Exit.CRASH:
            self.campaign.handle_crash(self, program, res)
            return None
        novelty = cov_merge_and_classify(cov, self.glob)
        if not (novelty or force):
            return None
        return self._enqueue(program, res, _digest(program), name)

    def _enqueue(self, program: BytecodeProgram, res: ExecResult, digest: int, name: str = "") -> QueueEntry:
        entry = QueueEntry.from_run(self.guest.spec, program, res, name or f"{digest:08x}")
        self.queue.append(entry)
        self.ec.corpus.append(entry.program)
        fname = self.campaign.save_queue_file(entry)
        if fname:
            self.known_files.add(fname)
        return entry

    def fuzz_one(self) -> None:
        entry = schedule_next(self.queue, self.rng, self.sched)
        for f in fuzz_entry(entry, self.campaign.cfg.policy, self.rng, self.ec):
            if f.kind == "crash":
                self.campaign.handle_crash(self, f.program, f.result)
            elif f.kind == "objective":
                self.campaign.objective_hits += 1
                self._enqueue(f.program, f.result, _digest(f.program))
            else:
                self._enqueue(f.program, f.result, _digest(f.program))

    def sync(self) -> None:
        """Import queue files written by other workers."""
        qdir = self.campaign.queue_dir
        if qdir is None:
            return
        for path in sorted(qdir.glob("*.nxb")):
            if path.name in self.known_files:
                continue
            self.known_files.add(path.name)
            try:
                program = program_parse(self.guest.spec, path.read_bytes())
            except (OSError, ProgramError) as e:
                log.warning("skipping unreadable queue file %s: %s", path, e)
                continue
            self.calibrate(program)


def _digest(program: BytecodeProgram) -> int:
    return zlib.crc32(program.serialize())


class Campaign:
    def __init__(self, cfg: CampaignConfig, spec: FormatSpec, seeds: list[BytecodeProgram]):
        if not seeds:
            raise ValueError("campaign needs at least one seed")
        self.cfg = cfg
        self.spec = spec
        self.stats = FuzzStats()
        self.out_dir = Path(cfg.out_dir) if cfg.out_dir is not None else None
        self.queue_dir = self.out_dir / "queue" if self.out_dir is not None else None
        self.crashes = CrashStore(self.out_dir)
        self.corpus_names: set[str] = set()
        self.objective_hits = 0
        self.stop_reason: str | None = None
        self._stats_fh = None
        self._stats_writer = None
        if self.out_dir is not None:
            self._prepare_dir()

        target = make_target(cfg.target, **cfg.target_options)
        first, self.root = Guest.boot(target, spec, cfg.op_budget)
        guests = [first] + [
            Guest.from_root(make_target(cfg.target, **cfg.target_options), spec, self.root)
            for _ in range(cfg.workers - 1)
        ]
        self.workers = [Worker(i, self, g) for i, g in enumerate(guests)]

        self._t0_wall = time.monotonic()
        self._t0_unix = time.time() if cfg.clock == "wall" else 0.0
        self._next_row = 1.0
        self._next_sync = cfg.sync_interval
        self._last_row = (0.0, 0)
        for w in self.workers:
            for i, s in enumerate(seeds):
                w.calibrate(s, force=True, name=f"seed-{i:03d}")

    @property
    def root_allocations(self) -> int:
        return RootSnapshot.allocations

    # -- directory layout
    def _prepare_dir(self) -> None:
        try:
            (self.out_dir / "queue").mkdir(parents=True, exist_ok=True)
            (self.out_dir / "crashes").mkdir(exist_ok=True)
            lines = [f"{k}={v}" for k, v in sorted(self.cfg.flat().items())]
            (self.out_dir / "config.txt").write_text("\n".join(lines) + "\n")
            self._stats_fh = open(self.out_dir / "stats.csv", "w", newline="")
        except OSError as e:
            raise OSError(f"cannot write campaign directory {self.out_dir}: {e}") from e
        self._stats_writer = csv.writer(self._stats_fh)
        self._stats_writer.writerow(STATS_HEADER)
        self._stats_fh.flush()

    def save_queue_file(self, entry: QueueEntry) -> str | None:
        name = f"{_digest(entry.program):08x}.nxb"
        new = name not in self.corpus_names
        self.corpus_names.add(name)
        if self.queue_dir is None:
            return name
        path = self.queue_dir / name
        if new and not path.exists():
            _atomic_write(path, entry.program.serialize())
        return name

    # -- clock and stats
    def now(self) -> float:
        """Seconds since the campaign started, on the configured clock."""
        if self.cfg.clock == "virtual":
            return self.stats.runs * self.cfg.exec_ms / 1000.0
        return time.monotonic() - self._t0_wall

    def edges_found(self) -> int:
        if len(self.workers) == 1:
            return self.workers[0].glob.edges_found()
        union = GlobalCoverage(self.cfg.map_size)
        for w in self.workers:
            union.merge_from(w.glob)
        return union.edges_found()

    def stats_row(self, t: float) -> list:
        s = self.stats
        t_prev, execs_prev = self._last_row
        rate = (s.execs - execs_prev) / (t - t_prev) if t > t_prev else 0.0
        self._last_row = (t, s.execs)
        return [
            f"{self._t0_unix + t:.3f}", s.execs, f"{rate:.1f}", self.edges_found(), len(self.corpus_names),
            self.crashes.unique, s.inc_snapshots_created, s.inc_reuses, s.packets_skipped,
        ]

    def _write_row(self, t: float) -> None:
        row = self.stats_row(t)
        if self._stats_writer is not None:
            self._stats_writer.writerow(row)
            self._stats_fh.flush()

    def tick(self) -> None:
        t = self.now()
        if t >= self._next_row:
            self._write_row(t)
            self._next_row = max(self._next_row + 1.0, math.floor(t) + 1.0)
        if t >= self._next_sync:
            self._next_sync = t + self.cfg.sync_interval
            if len(self.workers) > 1:
                for w in self.workers:
                    w.sync()
            self.save_global_cov()
        if t >= self.cfg.duration:
            self.stop_reason = self.stop_reason or "duration"
        if self.cfg.max_execs is not None and self.stats.execs >= self.cfg.max_execs:
            self.stop_reason = self.stop_reason or "max_execs"

    def on_exec(self, finding: Finding | None) -> bool:
        if finding is not None and finding.kind == "objective" and self.cfg.stop_on_objective:
            self.stop_reason = "objective"
        self.tick()
        return self.stop_reason is not None

    def handle_crash(self, worker: Worker, program: BytecodeProgram, res: ExecResult) -> None:
        def replay(p):
            return worker.guest.execute(p, op_budget=self.cfg.op_budget)

        crash_id = report_crash(program, res, self.crashes, self.cfg.target, replay)
        filed = (self.cfg.target, res.crash_site) in self.crashes.records
        if filed and self.stop_reason is None and (self.cfg.stop_on_crash or res.crash_site == self.cfg.stop_on_site):
            self.stop_reason = f"crash {self.crashes.records[(self.cfg.target, res.crash_site)].crash_id}"

    def save_global_cov(self) -> None:
        if self.out_dir is None:
            return
        union = GlobalCoverage(self.cfg.map_size)
        for w in self.workers:
            union.merge_from(w.glob)
        _atomic_write(self.out_dir / "global_cov.bin", union.to_bytes())

    def run(self) -> FuzzStats:
        try:
            while self.stop_reason is None:
                for w in self.workers:
                    w.fuzz_one()
                    if self.stop_reason is not None:
                        break
        finally:
            self._write_row(self.now())
            self.save_global_cov()
            if self._stats_fh is not None:
                self._stats_fh.close()
                self._stats_fh = None
        return self.stats
