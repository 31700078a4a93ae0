"""Command line: fuzz, bench-snapshot, replay, import."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from snapfuzz.bench import BENCH_PAGE_SIZE, COLUMNS, DIRTY_COUNTS, MEMORY_PAGES, run_bench
from snapfuzz.bytecode import FormatSpec, ProgramError, SpecError, program_parse, program_serialize, spec_parse
from snapfuzz.coverage import MAP_SIZE
from snapfuzz.fuzz_core import CRASH_REPLAYS, POLICIES, Campaign, CampaignConfig, PolicyConfig
from snapfuzz.guest import DEFAULT_OP_BUDGET, TARGETS, Exit, Guest, make_target
from snapfuzz.paged_state import REMIRROR_INTERVAL
from snapfuzz.seed_import import DISSECTORS, DumpError, build_seed, dissect_dump, load_dump
from snapfuzz.seeds import default_seeds, default_spec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_CRASH = 10

log = logging.getLogger("snapfuzz")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# flag name -> (config key, type); config files use the same keys
FUZZ_KEYS = {
    "target": str, "spec": str, "seeds": str, "policy": str, "workers": int, "duration": float,
    "out": str, "rng_seed": int, "reuse_limit": int, "min_packets_for_inc": int,
    "remirror_interval": int, "op_budget": int, "map_size": int, "clock": str, "max_execs": int,
}
FUZZ_DEFAULTS = {
    "target": "ftp_like", "spec": None, "seeds": None, "policy": "balanced", "workers": 1,
    "duration": 60.0, "out": "campaign", "rng_seed": 0, "reuse_limit": 50, "min_packets_for_inc": 4,
    "remirror_interval": REMIRROR_INTERVAL, "op_budget": DEFAULT_OP_BUDGET, "map_size": MAP_SIZE,
    "clock": "wall", "max_execs": None,
}


def read_config(path: str) -> dict:
    """key=value lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in FUZZ_KEYS:
            raise UsageError(f"{path}:{lineno}: expected one of {', '.join(sorted(FUZZ_KEYS))} as key=value")
        try:
            out[key] = FUZZ_KEYS[key](value.strip())
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {value.strip()!r}") from None
    return out


def merged_settings(args: argparse.Namespace) -> dict:
    settings = dict(FUZZ_DEFAULTS)
    if args.config:
        settings.update(read_config(args.config))
    for key in FUZZ_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    return settings


def load_spec(path: str | None) -> FormatSpec:
    if path is None:
        return default_spec()
    try:
        return spec_parse(Path(path).read_text())
    except OSError as e:
        raise OSError(f"cannot read spec {path}: {e}") from e


def load_seed_dir(spec: FormatSpec, path: str) -> list:
    d = Path(path)
    if not d.is_dir():
        raise OSError(f"seed directory {path} does not exist")
    seeds = [program_parse(spec, f.read_bytes()) for f in sorted(d.glob("*.nxb"))]
    if not seeds:
        raise OSError(f"no .nxb seeds in {path}")
    return seeds


# ---- commands ---------------------------------------------------------------

def cmd_fuzz(args) -> int:
    s = merged_settings(args)
    if s["target"] not in TARGETS:
        raise UsageError(f"unknown target {s['target']!r}")
    if s["policy"] not in POLICIES:
        raise UsageError(f"unknown policy {s['policy']!r}")
    try:
        policy = PolicyConfig(s["policy"], s["reuse_limit"], s["min_packets_for_inc"])
        cfg = CampaignConfig(
            target=s["target"], policy=policy, workers=s["workers"], duration=s["duration"],
            max_execs=s["max_execs"], out_dir=Path(s["out"]), rng_seed=s["rng_seed"], op_budget=s["op_budget"],
            map_size=s["map_size"], remirror_interval=s["remirror_interval"], clock=s["clock"],
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    spec = load_spec(s["spec"])
    seeds = load_seed_dir(spec, s["seeds"]) if s["seeds"] else default_seeds(s["target"], spec)
    campaign = Campaign(cfg, spec, seeds)
    log.info("fuzzing %s with policy %s, %d worker(s), out=%s", cfg.target, policy.policy, cfg.workers, cfg.out_dir)
    try:
        stats = campaign.run()
    except KeyboardInterrupt:
        stats = campaign.stats
        log.info("interrupted")
    print(
        f"execs={stats.execs} edges={campaign.edges_found()} corpus={len(campaign.corpus_names)} "
        f"crashes={campaign.crashes.unique} inc_snapshots={stats.inc_snapshots_created} "
        f"packets_skipped={stats.packets_skipped}"
    )
    return EXIT_OK


def cmd_bench_snapshot(args) -> int:
    skipped: list = []
    rows = run_bench(args.counts, args.memories, args.reps, args.page_size, args.rng_seed, skipped)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())
    finally:
        if args.out:
            out.close()
    for num_pages, n in skipped:
        print(f"note: skipped n={n} on {num_pages} pages (2n pages do not fit)", file=sys.stderr)
    return EXIT_OK


def cmd_replay(args) -> int:
    spec = load_spec(args.spec)
    try:
        data = Path(args.input).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {args.input}: {e}") from e
    program = program_parse(spec, data)
    if args.target not in TARGETS:
        raise UsageError(f"unknown target {args.target!r}")
    guest, _ = Guest.boot(make_target(args.target), spec)
    results = [guest.execute(program.stripped()) for _ in range(CRASH_REPLAYS)]
    for i, r in enumerate(results, 1):
        site = f" site={r.crash_site:#06x}" if r.crash_site is not None else ""
        print(f"run {i}: exit={r.exit.value}{site} ops={r.ops_executed} packets={r.packets_consumed}")
    first = results[0]
    if first.exit is Exit.CRASH and all(r.exit is Exit.CRASH and r.crash_site == first.crash_site for r in results):
        print(f"crash reproduced {CRASH_REPLAYS}/{CRASH_REPLAYS} at site {first.crash_site:#06x}")
        return EXIT_CRASH
    return EXIT_OK


def cmd_import(args) -> int:
    spec = load_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(p) for p in args.inputs]
    for i, path in enumerate(inputs):
        dump = load_dump(path, args.format)
        seed = build_seed(spec, dissect_dump(dump, args.dissector))
        dest = out / f"seed-{i:03d}.nxb"
        dest.write_bytes(program_serialize(seed))
        print(f"{path} -> {dest} ({len(seed.ops)} ops)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snapfuzz", description="Snapshot-based fuzzer for simulated network targets.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    f = sub.add_parser("fuzz", help="run a campaign")
    f.add_argument("--target", choices=sorted(TARGETS))
    f.add_argument("--spec")
    f.add_argument("--seeds", help="directory of .nxb seeds (default: built-in seed for the target)")
    f.add_argument("--policy", choices=POLICIES)
    f.add_argument("--workers", type=int)
    f.add_argument("--duration", type=float, help="seconds")
    f.add_argument("--out")
    f.add_argument("--config")
    f.add_argument("--rng-seed", dest="rng_seed", type=int)
    f.add_argument("--reuse-limit", dest="reuse_limit", type=int)
    f.add_argument("--min-packets-for-inc", dest="min_packets_for_inc", type=int)
    f.add_argument("--remirror-interval", dest="remirror_interval", type=int)
    f.add_argument("--op-budget", dest="op_budget", type=int)
    f.add_argument("--map-size", dest="map_size", type=int)
    f.add_argument("--clock", choices=("wall", "virtual"),
                   help="virtual: 1 ms per execution, for reproducible stats.csv")
    f.add_argument("--max-execs", dest="max_execs", type=int)
    f.set_defaults(func=cmd_fuzz)

    b = sub.add_parser("bench-snapshot", help="incremental snapshot microbenchmark, CSV on stdout")
    b.add_argument("--reps", type=int, default=1000)
    b.add_argument("--page-size", type=int, default=BENCH_PAGE_SIZE)
    b.add_argument("--counts", type=int, nargs="+", default=list(DIRTY_COUNTS))
    b.add_argument("--memories", type=int, nargs="+", default=list(MEMORY_PAGES))
    b.add_argument("--rng-seed", dest="rng_seed", type=int, default=0)
    b.add_argument("--out", help="write CSV here instead of stdout")
    b.set_defaults(func=cmd_bench_snapshot)

    r = sub.add_parser("replay", help="run a program from the root snapshot three times")
    r.add_argument("input")
    r.add_argument("--target", required=True, choices=sorted(TARGETS))
    r.add_argument("--spec")
    r.set_defaults(func=cmd_replay)

    i = sub.add_parser("import", help="convert packet dumps into seeds")
    i.add_argument("--in", dest="inputs", nargs="+", required=True)
    i.add_argument("--format", choices=("jsonl", "rawdir"), default="jsonl")
    i.add_argument("--dissector", choices=DISSECTORS, default="crlf")
    i.add_argument("--out", required=True)
    i.add_argument("--spec")
    i.set_defaults(func=cmd_import)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"snapfuzz: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ProgramError, SpecError, DumpError) as e:
        print(f"snapfuzz: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
