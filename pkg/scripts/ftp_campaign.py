"""Time to the stateful crash (site A) on the ftp-like target, one worker per run."""

import argparse
import tempfile
import time
from pathlib import Path

from snapfuzz.fuzz_core import Campaign, CampaignConfig, PolicyConfig
from snapfuzz.guest.ftp_like import SITE_A, SITE_B
from snapfuzz.seeds import default_seeds, default_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--policy", default="balanced")
    ap.add_argument("--duration", type=float, default=300.0)
    ap.add_argument("--out", help="keep campaign directories under this path")
    args = ap.parse_args()
    spec = default_spec()
    base = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="ftp-campaign-"))
    for seed in args.seeds:
        cfg = CampaignConfig(target="ftp_like", policy=PolicyConfig(args.policy), duration=args.duration,
                             out_dir=base / f"seed-{seed}", rng_seed=seed, stop_on_site=SITE_A)
        t0 = time.monotonic()
        c = Campaign(cfg, spec, default_seeds("ftp_like", spec))
        st = c.run()
        took = time.monotonic() - t0
        found = ("ftp_like", SITE_A) in c.crashes.records
        b = ("ftp_like", SITE_B) in c.crashes.records
        print(f"seed {seed}: site A {'found' if found else 'not found'} after {took:.1f}s, {st.execs} execs "
              f"({st.execs / took:.0f}/s), {c.edges_found()} edges, site B {'found' if b else 'not found'}")
    print(f"campaign directories in {base}")


if __name__ == "__main__":
    main()
