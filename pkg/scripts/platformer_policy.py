"""Guest runs needed to reach the flag on the bundled level, per placement policy."""

import argparse
import statistics
import time

from snapfuzz.fuzz_core import Campaign, CampaignConfig, PolicyConfig
from snapfuzz.seeds import default_seeds, default_spec


def solve(spec, policy, seed, cap):
    cfg = CampaignConfig(target="platformer", policy=PolicyConfig(policy), duration=1e9, clock="virtual",
                         rng_seed=seed, max_execs=cap, stop_on_objective=True)
    c = Campaign(cfg, spec, default_seeds("platformer", spec))
    c.run()
    return c.stats.objective_at


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--cap", type=int, default=20_000, help="max test cases per run")
    ap.add_argument("--policies", nargs="+", default=["aggressive", "balanced", "none"])
    args = ap.parse_args()
    spec = default_spec()
    for policy in args.policies:
        t0 = time.monotonic()
        runs = [solve(spec, policy, s, args.cap) for s in range(args.seeds)]
        counted = [r if r is not None else args.cap for r in runs]
        shown = ", ".join(str(r) if r is not None else f">{args.cap}" for r in runs)
        print(f"{policy:>10}: median {statistics.median(counted):>7.0f}  [{shown}]  ({time.monotonic() - t0:.0f}s)")


if __name__ == "__main__":
    main()
