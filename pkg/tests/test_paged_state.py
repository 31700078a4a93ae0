import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snapfuzz.paged_state import (
    AuxState,
    IncrementalSnapshot,
    PagedMemory,
    RootSnapshot,
    SnapshotError,
    inc_create,
    inc_restore,
    mem_create,
    mem_read,
    mem_write,
    root_create,
    root_restore,
)

PAGE = 4096


def test_fresh_memory():
    mem = mem_create(8, PAGE)
    assert mem.size == 32 * 1024
    assert mem.dirty_stack == []
    assert mem_read(mem, 0, 16) == bytes(16)


def test_large_bitmap_is_one_byte_per_page():
    mem = mem_create(1 << 20, 64)
    assert mem.dirty_bitmap.nbytes == 1 << 20


@pytest.mark.parametrize("pages,size", [(0, PAGE), (-1, PAGE), (4, 100), (4, 32)])
def test_bad_geometry(pages, size):
    with pytest.raises(ValueError):
        mem_create(pages, size)


def test_write_tracks_pages():
    mem = mem_create(8, PAGE)
    mem_write(mem, 5 * PAGE, b"x")
    assert mem.dirty_stack == [5]
    mem_write(mem, 5 * PAGE + 100, b"y")
    assert mem.dirty_stack == [5]

    mem = mem_create(8, PAGE)
    mem_write(mem, 0, bytes(PAGE + 1))
    assert mem.dirty_stack == [0, 1]


def test_read_is_side_effect_free():
    mem = mem_create(8, PAGE)
    mem_write(mem, 10, b"hello")
    before = list(mem.dirty_stack)
    assert mem_read(mem, 10, 5) == b"hello"
    assert mem.dirty_stack == before


@pytest.mark.parametrize("addr,n", [(-1, 1), (8 * PAGE - 1, 2), (8 * PAGE, 1)])
def test_out_of_bounds(addr, n):
    mem = mem_create(8, PAGE)
    with pytest.raises(IndexError):
        mem_write(mem, addr, bytes(n))
    with pytest.raises(IndexError):
        mem_read(mem, addr, n)


def test_root_create_copies_and_clears():
    mem = mem_create(8, PAGE)
    mem_write(mem, 3 * PAGE, b"\xaa" * 10)
    allocs = RootSnapshot.allocations
    root = root_create(mem, AuxState(b"aux"))
    assert RootSnapshot.allocations == allocs + 1
    assert root.full_copy.tobytes() == mem.data.tobytes()
    assert mem.dirty_stack == [] and not mem.dirty_bitmap.any()
    assert root.aux.blob == b"aux"

    twin = mem_create(8, PAGE)
    mem_write(twin, 3 * PAGE, b"\xaa" * 10)
    assert root_create(twin).full_copy.tobytes() == root.full_copy.tobytes()


def test_root_restore_copies_only_dirty():
    mem = mem_create(8, PAGE)
    root = root_create(mem)
    c0 = mem.pages_copied_counter
    assert root_restore(mem, root) == 0
    assert mem.pages_copied_counter == c0

    mem_write(mem, 2 * PAGE, b"a")
    mem_write(mem, 7 * PAGE, b"b")
    assert root_restore(mem, root) == 2
    assert mem.data.tobytes() == root.full_copy.tobytes()
    assert root_restore(mem, root) == 0


def test_root_restore_scales_with_dirty_count():
    mem = mem_create(1 << 20, 64)
    root = root_create(mem)
    pages = np.random.default_rng(1).choice(1 << 20, 1000, replace=False)
    mem.dirty_pages(pages, fill=7)
    c0 = mem.pages_copied_counter
    assert root_restore(mem, root) == 1000
    assert mem.pages_copied_counter - c0 == 1000
    assert not mem.data.any()


def test_geometry_mismatch():
    root = root_create(mem_create(8, PAGE))
    with pytest.raises(SnapshotError):
        root_restore(mem_create(4, PAGE), root)


def test_inc_create_captures_dirty_pages():
    mem = mem_create(16, PAGE)
    mem_write(mem, 0, b"root data")
    root = root_create(mem)
    mem_write(mem, 4 * PAGE, b"\xaa" * PAGE)
    inc = inc_create(mem, root)
    assert inc.captured_pages == {4}
    assert inc.read_page(4) == b"\xaa" * PAGE
    for p in range(16):
        if p != 4:
            assert inc.read_page(p) == root.page_view()[p].tobytes()


def test_recycled_snapshot_reads_root_for_stale_pages():
    mem = mem_create(16, PAGE)
    root = root_create(mem)
    mem_write(mem, 4 * PAGE, b"\xaa" * 8)
    first = inc_create(mem, root)
    root_restore(mem, root)
    mem_write(mem, 9 * PAGE, b"\xbb" * 8)
    second = inc_create(mem, root, inc=first)
    assert second is first
    assert {9} <= second.captured_pages
    # brute-force oracle: the mirror is exactly the current memory
    assert second.mirror_bytes() == mem.data.tobytes()
    assert second.read_page(4) == root.page_view()[4].tobytes()


def test_remirror_every_interval():
    mem = mem_create(16, PAGE)
    root = root_create(mem)
    inc = IncrementalSnapshot(root)
    for i in range(1999):
        mem_write(mem, (i % 16) * PAGE, bytes([i % 251 + 1]))
        inc = inc_create(mem, root, inc=inc)
        root_restore(mem, root)
    assert inc.remirrors == 0
    assert len(inc.captured_pages) == 16
    mem_write(mem, 3 * PAGE, b"z")
    inc = inc_create(mem, root, inc=inc)
    assert inc.remirrors == 1
    assert inc.creations_since_remirror == 0
    assert inc.captured_pages == {3}
    assert inc.mirror_bytes() == mem.data.tobytes()


def test_inc_restore_examples():
    mem = mem_create(16, PAGE)
    root = root_create(mem)
    mem_write(mem, 5 * PAGE, b"prefix")
    inc = inc_create(mem, root)
    snap = mem.data.tobytes()
    assert inc_restore(mem, inc) == 0
    mem_write(mem, 1 * PAGE, b"x")
    mem_write(mem, 2 * PAGE, b"y")
    assert inc_restore(mem, inc) == 2
    assert mem.data.tobytes() == snap


def test_inc_restore_after_root_restore():
    mem = mem_create(16, PAGE)
    root = root_create(mem)
    mem_write(mem, 5 * PAGE, b"prefix")
    inc = inc_create(mem, root)
    snap = mem.data.tobytes()
    mem_write(mem, 6 * PAGE, b"suffix")
    root_restore(mem, root)
    mem_write(mem, 7 * PAGE, b"other")
    inc_restore(mem, inc)
    assert mem.data.tobytes() == snap
    # and a plain suffix restore still works afterwards
    mem_write(mem, 8 * PAGE, b"again")
    assert inc_restore(mem, inc) == 1
    assert mem.data.tobytes() == snap


def test_stale_incremental_rejected():
    mem = mem_create(8, PAGE)
    root = root_create(mem)
    inc = inc_create(mem, root)
    root_create(mem)
    with pytest.raises(SnapshotError):
        inc_restore(mem, inc)


def test_restore_after_switching_roots_is_full():
    a = mem_create(4, PAGE)
    root_a = root_create(a)
    mem_write(a, 0, b"other root")
    root_b = root_create(a)
    assert root_restore(a, root_a) == 4
    assert a.data.tobytes() == root_a.full_copy.tobytes()
    assert root_restore(a, root_b) == 4


# ---- property test against a full-copy oracle ---------------------------------

N_PAGES, P_SIZE = 12, 64

writes = st.lists(
    st.tuples(st.integers(0, N_PAGES * P_SIZE - 1), st.binary(min_size=1, max_size=3 * P_SIZE)),
    max_size=6,
)
action = st.one_of(
    st.tuples(st.just("write"), writes),
    st.tuples(st.just("root"), st.none()),
    st.tuples(st.just("create"), st.none()),
    st.tuples(st.just("restore"), st.none()),
)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=N_PAGES * P_SIZE), st.lists(action, max_size=30))
def test_matches_full_copy_oracle(init, actions):
    mem = PagedMemory(N_PAGES, P_SIZE)
    mem_write(mem, 0, init)
    root = root_create(mem)
    oracle_root = bytes(mem.data)
    oracle_inc = None
    inc = IncrementalSnapshot(root, remirror_interval=3)
    live = None
    dirty_since = set()
    for kind, arg in actions:
        if kind == "write":
            for addr, data in arg:
                data = data[: N_PAGES * P_SIZE - addr]
                mem_write(mem, addr, data)
                dirty_since.update(range(addr // P_SIZE, (addr + len(data) - 1) // P_SIZE + 1))
        elif kind == "root":
            copied = root_restore(mem, root)
            assert bytes(mem.data) == oracle_root
            assert copied <= N_PAGES
            dirty_since = set()
        elif kind == "create":
            live = inc = inc_create(mem, root, inc=inc)
            oracle_inc = bytes(mem.data)
            assert inc.mirror_bytes() == oracle_inc
            dirty_since = set()
        elif live is not None:
            plain = mem.inc_token == live.token
            copied = inc_restore(mem, live)
            assert bytes(mem.data) == oracle_inc
            if plain:
                assert copied == len(dirty_since)
            dirty_since = set()
        mem.check_coherent()
        assert len(mem.dirty_stack) == len(dirty_since)
