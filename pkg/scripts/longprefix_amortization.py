"""Ops executed per test case on the long-handshake target.

Part 1 pins the snapshot right after the 100-message handshake and reports
the mean ops per test case against the cost of the same program from the
root. Part 2 runs short campaigns per policy on the virtual clock and
compares their counters.
"""

import argparse
import random

from snapfuzz.coverage import GlobalCoverage
from snapfuzz.fuzz_core import Campaign, CampaignConfig, EntryContext, FuzzStats, PolicyConfig, QueueEntry, fuzz_entry
from snapfuzz.guest import Guest, make_target
from snapfuzz.seeds import default_spec, longprefix_seed


def pinned(spec, rounds, reuse, seed):
    guest, _ = Guest.boot(make_target("longprefix"), spec)
    program = longprefix_seed(spec)
    res = guest.execute(program)
    entry = QueueEntry.from_run(spec, program, res)
    ec = EntryContext(guest, GlobalCoverage(), FuzzStats(), [program])
    cfg = PolicyConfig("aggressive", reuse_limit=reuse)
    rng = random.Random(seed)
    for _ in range(rounds):
        entry.aggressive_cursor, entry.iters_since_new = 100, 0
        fuzz_entry(entry, cfg, rng, ec)
    return res.ops_executed, ec.stats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--reuse-limit", type=int, default=50)
    ap.add_argument("--seconds", type=float, default=20.0, help="virtual seconds per campaign")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    spec = default_spec()

    root_ops, s = pinned(spec, args.rounds, args.reuse_limit, args.seed)
    mean = s.ops / s.execs
    print(f"snapshot at packet 100, reuse {args.reuse_limit}: {s.execs} test cases, {s.prefix_runs} prefix runs")
    print(f"  mean ops per test case {mean:.2f} (prefix runs included), {root_ops} from the root, "
          f"{root_ops / mean:.2f}x fewer")

    print(f"\n{'policy':>10} {'execs':>7} {'ops/exec':>9} {'root-equiv/exec':>16} {'inc snaps':>10} {'skipped pkts':>13}")
    for policy in ("none", "balanced", "aggressive"):
        cfg = CampaignConfig(target="longprefix", policy=PolicyConfig(policy, reuse_limit=args.reuse_limit),
                             duration=args.seconds, clock="virtual", rng_seed=args.seed)
        c = Campaign(cfg, spec, [longprefix_seed(spec)])
        st = c.run()
        print(f"{policy:>10} {st.execs:>7} {st.ops / st.execs:>9.2f} {st.root_equivalent_ops / st.execs:>16.2f} "
              f"{st.inc_snapshots_created:>10} {st.packets_skipped:>13}")


if __name__ == "__main__":
    main()
