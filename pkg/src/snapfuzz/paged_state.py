"""Paged memory with dirty-page tracking, root and incremental snapshots.

Restores only ever walk the dirty stack, so their cost is proportional to
the number of pages touched since the snapshot point, not to memory size.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PAGE_SIZE = 4096
REMIRROR_INTERVAL = 2000
PML_FLUSH_PAGES = 512

_MAX_BYTES = 1 << 40

_root_ids = itertools.count(1)
_inc_tokens = itertools.count(1)


class SnapshotError(Exception):
    """Geometry mismatch, stale snapshot, or other misuse of a snapshot."""


@dataclass(frozen=True)
class AuxState:
    """Opaque non-memory state (emulated devices, counters) stored with a snapshot."""

    blob: bytes = b""


class PagedMemory:
    """Byte-addressable memory split into fixed-size pages.

    Two tracking levels are kept. ``dirty_stack`` / ``dirty_bitmap`` hold the
    pages written since the most recent snapshot point (root or incremental).
    When an incremental snapshot is taken the current level is folded into
    ``_base_pages`` so a later root restore still knows every page that
    differs from the root.
    """

    def __init__(self, num_pages: int, page_size: int = DEFAULT_PAGE_SIZE):
        if num_pages < 1:
            raise ValueError(f"num_pages must be >= 1, got {num_pages}")
        if page_size < 64 or page_size & (page_size - 1):
            raise ValueError(f"page_size must be a power of two >= 64, got {page_size}")
        if num_pages * page_size > _MAX_BYTES:
            raise ValueError("memory size overflows the supported range")
        self.page_size = page_size
        self.num_pages = num_pages
        self._shift = page_size.bit_length() - 1
        self.size = num_pages * page_size
        # bytearray for fast scalar access, numpy view over the same buffer for page copies
        self._buf = bytearray(self.size)
        self.data = np.frombuffer(self._buf, dtype=np.uint8)
        # one byte per page, same layout as KVM's dirty log
        self.dirty_bitmap = np.zeros(num_pages, dtype=np.uint8)
        self.dirty_stack: list[int] = []
        self._base_pages: list[int] = []
        self._base_flags = np.zeros(num_pages, dtype=np.uint8)
        self.root_id: int | None = None
        self.inc_token: int | None = None  # incremental snapshot the base level belongs to
        self.pages_copied_counter = 0
        self.flush_events = 0

    def pages(self) -> np.ndarray:
        """2-D ``(num_pages, page_size)`` view of the backing store."""
        return self.data.reshape(self.num_pages, self.page_size)

    def _check(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise IndexError(f"access [{addr}, {addr + length}) outside memory of {self.size} bytes")

    def write(self, addr: int, data: bytes) -> None:
        n = len(data)
        if addr < 0 or addr + n > self.size:
            self._check(addr, n)
        if n == 0:
            return
        self._buf[addr:addr + n] = data
        first = addr >> self._shift
        last = (addr + n - 1) >> self._shift
        bitmap = self.dirty_bitmap
        for page in range(first, last + 1):
            if not bitmap[page]:
                bitmap[page] = 1
                self.dirty_stack.append(page)

    def read(self, addr: int, length: int) -> bytes:
        if addr < 0 or length < 0 or addr + length > self.size:
            self._check(addr, length)
        return bytes(self._buf[addr:addr + length])

    def dirty_pages(self, pages, fill: int | None = None, rng: np.random.Generator | None = None) -> None:
        """Overwrite whole pages at once; used by the benchmark to dirty many pages quickly."""
        idx = np.asarray(pages, dtype=np.int64)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= self.num_pages:
            raise IndexError("page index outside memory")
        view = self.pages()
        if rng is not None:
            view[idx] = rng.integers(0, 256, size=(idx.size, self.page_size), dtype=np.uint8)
        else:
            view[idx] = 0 if fill is None else fill
        idx = np.unique(idx) if idx.size > 1 else idx
        new = idx[self.dirty_bitmap[idx] == 0]
        self.dirty_bitmap[new] = 1
        self.dirty_stack.extend(new.tolist())

    def _dirty_index(self) -> np.ndarray:
        return np.fromiter(self.dirty_stack, dtype=np.int64, count=len(self.dirty_stack))

    def _root_delta(self) -> np.ndarray:
        """Pages differing from the root: folded base level plus the current level, no repeats."""
        cur = self._dirty_index()
        if not self._base_pages:
            return cur
        base = np.fromiter(self._base_pages, dtype=np.int64, count=len(self._base_pages))
        fresh = cur[self._base_flags[cur] == 0] if cur.size else cur
        return np.concatenate([base, fresh])

    def _clear_level(self) -> None:
        if self.dirty_stack:
            self.dirty_bitmap[self._dirty_index()] = 0
            self.dirty_stack = []

    def _clear_base(self) -> None:
        if self._base_pages:
            self._base_flags[np.asarray(self._base_pages, dtype=np.int64)] = 0
            self._base_pages = []
        self.inc_token = None

    def _set_base(self, pages: np.ndarray, token: int) -> None:
        self._clear_base()
        self._base_flags[pages] = 1
        self._base_pages = pages.tolist()
        self.inc_token = token

    def _fold_level(self) -> None:
        """Move the current dirty level into the base level (done at incremental creation)."""
        cur = self._dirty_index()
        if cur.size:
            fresh = cur[self._base_flags[cur] == 0]
            self._base_flags[fresh] = 1
            self._base_pages.extend(fresh.tolist())
        self._clear_level()

    def _account(self, copied: int) -> None:
        self.pages_copied_counter += copied
        self.flush_events += -(-copied // PML_FLUSH_PAGES)

    def check_coherent(self) -> None:
        """Assert the bitmap/stack invariants; cheap enough for tests, not for hot loops."""
        flagged = set(np.flatnonzero(self.dirty_bitmap).tolist())
        assert len(self.dirty_stack) == len(set(self.dirty_stack)), "duplicate page in dirty stack"
        assert flagged == set(self.dirty_stack), "bitmap and dirty stack disagree"
        based = set(np.flatnonzero(self._base_flags).tolist())
        assert based == set(self._base_pages)


@dataclass(frozen=True, eq=False)
class RootSnapshot:
    """Full copy of memory plus aux state. Immutable; share it between workers."""

    full_copy: np.ndarray
    aux: AuxState
    page_size: int
    num_pages: int
    id: int = field(default_factory=lambda: next(_root_ids))

    allocations = 0  # full copies ever made, per process

    def page_view(self) -> np.ndarray:
        return self.full_copy.reshape(self.num_pages, self.page_size)


@dataclass(eq=False)
class IncrementalSnapshot:
    """Second-level snapshot: a copy-on-write view of the root with private dirty pages.

    ``slot_of_page[p]`` is -1 while page ``p`` still reads through to the root;
    otherwise it indexes the private page store. Private pages accumulate across
    recycled creations until the periodic re-mirror drops them.
    """

    root: RootSnapshot
    aux: AuxState = AuxState()
    remirror_interval: int = REMIRROR_INTERVAL
    creations_since_remirror: int = 0
    total_creations: int = 0
    remirrors: int = 0
    slot_of_page: np.ndarray = field(init=False)
    _private: np.ndarray = field(init=False)
    _captured: list[int] = field(init=False, default_factory=list)
    _delta: np.ndarray = field(init=False)
    _mark: np.ndarray = field(init=False)  # scratch flags, always all-False between calls
    token: int = field(init=False, default=0)

    def __post_init__(self):
        self.slot_of_page = np.full(self.root.num_pages, -1, dtype=np.int64)
        self._mark = np.zeros(self.root.num_pages, dtype=bool)
        self._private = np.empty((0, self.root.page_size), dtype=np.uint8)
        self._delta = np.empty(0, dtype=np.int64)

    @property
    def captured_pages(self) -> set[int]:
        return set(self._captured)

    @property
    def private_bytes(self) -> int:
        return len(self._captured) * self.root.page_size

    def read_page(self, page: int) -> bytes:
        slot = self.slot_of_page[page]
        if slot < 0:
            return self.root.page_view()[page].tobytes()
        return self._private[slot].tobytes()

    def mirror_bytes(self) -> bytes:
        """Materialise the whole logical mirror (tests and debugging only)."""
        return b"".join(self.read_page(p) for p in range(self.root.num_pages))

    def _remirror(self) -> None:
        if self._captured:
            self.slot_of_page[np.asarray(self._captured, dtype=np.int64)] = -1
        self._captured = []
        self._private = np.empty((0, self.root.page_size), dtype=np.uint8)
        self.creations_since_remirror = 0
        self.remirrors += 1

    def _slots_for(self, pages: np.ndarray) -> np.ndarray:
        slots = self.slot_of_page[pages]
        missing = pages[slots < 0]
        if missing.size:
            start = len(self._captured)
            need = start + missing.size
            if need > self._private.shape[0]:
                cap = max(need, 2 * self._private.shape[0], 16)
                grown = np.empty((cap, self.root.page_size), dtype=np.uint8)
                grown[:start] = self._private[:start]
                self._private = grown
            self.slot_of_page[missing] = np.arange(start, need)
            self._captured.extend(missing.tolist())
            slots = self.slot_of_page[pages]
        return slots


def mem_create(num_pages: int, page_size: int = DEFAULT_PAGE_SIZE) -> PagedMemory:
    return PagedMemory(num_pages, page_size)


def mem_write(mem: PagedMemory, addr: int, data: bytes) -> None:
    mem.write(addr, data)


def mem_read(mem: PagedMemory, addr: int, length: int) -> bytes:
    return mem.read(addr, length)


def root_create(mem: PagedMemory, aux: AuxState = AuxState()) -> RootSnapshot:
    snap = RootSnapshot(mem.data.copy(), aux, mem.page_size, mem.num_pages)
    snap.full_copy.setflags(write=False)
    RootSnapshot.allocations += 1
    mem._clear_level()
    mem._clear_base()
    mem.root_id = snap.id
    return snap


def _check_geometry(mem: PagedMemory, root: RootSnapshot) -> None:
    if (mem.num_pages, mem.page_size) != (root.num_pages, root.page_size):
        raise SnapshotError(
            f"snapshot geometry {root.num_pages}x{root.page_size} does not match "
            f"memory {mem.num_pages}x{mem.page_size}"
        )


def root_restore(mem: PagedMemory, root: RootSnapshot) -> int:
    """Reset memory to ``root``; returns the number of pages copied."""
    _check_geometry(mem, root)
    if mem.root_id not in (None, root.id):
        # memory was last synchronised with another root; only a full copy is safe
        mem.data[:] = root.full_copy
        mem._clear_level()
        mem._clear_base()
        mem.root_id = root.id
        mem._account(mem.num_pages)
        return mem.num_pages
    idx = mem._root_delta()
    if idx.size:
        mem.pages()[idx] = root.page_view()[idx]
    mem._clear_level()
    mem._clear_base()
    mem.root_id = root.id
    mem._account(int(idx.size))
    return int(idx.size)


def memory_from_root(root: RootSnapshot) -> PagedMemory:
    """Fresh worker memory initialised from a shared root (no snapshot allocation)."""
    mem = PagedMemory(root.num_pages, root.page_size)
    mem.data[:] = root.full_copy
    mem.root_id = root.id
    return mem


def inc_create(
    mem: PagedMemory,
    root: RootSnapshot,
    aux: AuxState = AuxState(),
    inc: IncrementalSnapshot | None = None,
) -> IncrementalSnapshot:
    """Capture the pages dirtied since the root into a (possibly recycled) mirror."""
    _check_geometry(mem, root)
    if mem.root_id != root.id:
        raise SnapshotError("memory is not based on this root snapshot")
    if inc is None or inc.root is not root:
        inc = IncrementalSnapshot(root)
    inc.creations_since_remirror += 1
    inc.total_creations += 1
    if inc.creations_since_remirror >= inc.remirror_interval:
        inc._remirror()
    dirty = mem._root_delta()
    # pages captured earlier but clean now must read as root again
    if inc._captured:
        stale = np.asarray(inc._captured, dtype=np.int64)
        if dirty.size:
            inc._mark[dirty] = True
            stale = stale[~inc._mark[stale]]
            inc._mark[dirty] = False
        if stale.size:
            inc._private[inc.slot_of_page[stale]] = root.page_view()[stale]
    if dirty.size:
        slots = inc._slots_for(dirty)
        inc._private[slots] = mem.pages()[dirty]
    inc._delta = dirty
    inc.aux = aux
    inc.token = next(_inc_tokens)
    mem._fold_level()
    mem.inc_token = inc.token
    return inc


def inc_restore(mem: PagedMemory, inc: IncrementalSnapshot) -> int:
    """Reset memory to the incremental snapshot; returns the number of pages copied."""
    _check_geometry(mem, inc.root)
    if mem.root_id != inc.root.id:
        raise SnapshotError("incremental snapshot is stale: its root is no longer active")
    idx = mem._dirty_index()
    if mem.inc_token != inc.token:
        # memory went back to the root (or elsewhere) since this snapshot was taken:
        # everything that differs from either the root or the snapshot must be copied
        idx = mem._root_delta()
        if inc._delta.size:
            inc._mark[idx] = True
            extra = inc._delta[~inc._mark[inc._delta]]
            inc._mark[idx] = False
            idx = np.concatenate([idx, extra])
    if idx.size:
        slots = inc.slot_of_page[idx]
        own = slots >= 0
        view = mem.pages()
        if own.any():
            view[idx[own]] = inc._private[slots[own]]
        if not own.all():
            rest = idx[~own]
            view[rest] = inc.root.page_view()[rest]
    mem._clear_level()
    if mem.inc_token != inc.token:
        mem._set_base(inc._delta, inc.token)
    mem._account(int(idx.size))
    return int(idx.size)
