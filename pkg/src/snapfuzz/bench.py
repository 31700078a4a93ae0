"""Incremental snapshot create/restore microbenchmark.

Each repetition dirties a fixed set of ``n`` pages, takes an incremental
snapshot, dirties ``n`` further pages, restores the incremental snapshot
(the timed restore), then goes back to the root. The two page sets are
disjoint, as if the workload allocated fresh memory after the snapshot,
so a size is only benchmarked when ``2 * n`` pages fit in memory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from snapfuzz.paged_state import (
    IncrementalSnapshot,
    PagedMemory,
    inc_create,
    inc_restore,
    root_create,
    root_restore,
)

DIRTY_COUNTS = (10, 100, 1_000, 10_000, 100_000)
MEMORY_PAGES = (1 << 17, 1 << 20)
BENCH_PAGE_SIZE = 64  # keeps the 2^20-page memory at 64 MiB

COLUMNS = (
    "memory_pages", "page_size", "dirty_pages", "repetitions", "create_us_mean", "restore_us_mean",
    "create_pages_copied", "pages_copied", "bitmap_scan_model",
)


@dataclass(frozen=True)
class BenchRow:
    memory_pages: int
    page_size: int
    dirty_pages: int
    repetitions: int
    create_us_mean: float
    restore_us_mean: float
    create_pages_copied: int  # per repetition; every repetition must agree
    pages_copied: int
    bitmap_scan_model: int  # pages a bitmap-walking restore would inspect

    def as_csv(self) -> list:
        return [
            self.memory_pages, self.page_size, self.dirty_pages, self.repetitions,
            f"{self.create_us_mean:.2f}", f"{self.restore_us_mean:.2f}",
            self.create_pages_copied, self.pages_copied, self.bitmap_scan_model,
        ]


def bench_one(num_pages: int, n: int, reps: int = 1000, page_size: int = BENCH_PAGE_SIZE, seed: int = 0) -> BenchRow:
    if 2 * n > num_pages:
        raise ValueError(f"cannot dirty 2 x {n} pages in a {num_pages}-page memory")
    rng = np.random.default_rng(seed)
    pick = rng.permutation(num_pages)[: 2 * n]
    before, after = pick[:n], pick[n:]
    mem = PagedMemory(num_pages, page_size)
    root = root_create(mem)
    inc = IncrementalSnapshot(root)
    create_ns = restore_ns = 0
    create_copied = restore_copied = None
    for rep in range(reps):
        fill = rep % 255 + 1
        mem.dirty_pages(before, fill=fill)
        c0 = mem.pages_copied_counter
        t0 = time.perf_counter_ns()
        inc = inc_create(mem, root, inc=inc)
        t1 = time.perf_counter_ns()
        # creation copies the captured pages out of memory; it does not go through the restore counter
        copied = len(inc._delta)
        mem.dirty_pages(after, fill=fill)
        t2 = time.perf_counter_ns()
        restored = inc_restore(mem, inc)
        t3 = time.perf_counter_ns()
        assert mem.pages_copied_counter - c0 == restored
        if create_copied is None:
            create_copied, restore_copied = copied, restored
        elif (copied, restored) != (create_copied, restore_copied):
            raise AssertionError("page copy counts changed between repetitions")
        create_ns += t1 - t0
        restore_ns += t3 - t2
        root_restore(mem, root)
    return BenchRow(
        num_pages, page_size, n, reps, create_ns / reps / 1e3, restore_ns / reps / 1e3,
        create_copied, restore_copied, num_pages,
    )


def run_bench(
    counts=DIRTY_COUNTS, memories=MEMORY_PAGES, reps: int = 1000, page_size: int = BENCH_PAGE_SIZE,
    seed: int = 0, skipped: list | None = None,
) -> list[BenchRow]:
    rows = []
    for num_pages in memories:
        for n in counts:
            if 2 * n > num_pages:
                if skipped is not None:
                    skipped.append((num_pages, n))
                continue
            rows.append(bench_one(num_pages, n, reps, page_size, seed))
    return rows
