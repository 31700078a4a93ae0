"""Incremental snapshot create/restore cost vs. number of dirtied pages.

Writes the CSV that ``snapfuzz bench-snapshot`` prints and a short summary of
how restore time grows with n on each memory size.
"""

import argparse
import csv
import sys

from snapfuzz.bench import BENCH_PAGE_SIZE, COLUMNS, DIRTY_COUNTS, MEMORY_PAGES, run_bench


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--reps", type=int, default=1000)
    ap.add_argument("--page-size", type=int, default=BENCH_PAGE_SIZE)
    ap.add_argument("--out", default="bench_snapshot.csv")
    args = ap.parse_args()

    skipped = []
    rows = run_bench(DIRTY_COUNTS, MEMORY_PAGES, args.reps, args.page_size, skipped=skipped)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.as_csv())
    for pages, n in skipped:
        print(f"skipped n={n} on {pages} pages", file=sys.stderr)

    print(f"{'pages':>9} {'n':>7} {'create us':>10} {'restore us':>11} {'copied':>7} {'scan model':>10}")
    for r in rows:
        print(f"{r.memory_pages:>9} {r.dirty_pages:>7} {r.create_us_mean:>10.1f} {r.restore_us_mean:>11.1f} "
              f"{r.pages_copied:>7} {r.bitmap_scan_model:>10}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
