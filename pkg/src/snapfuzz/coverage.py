"""AFL-style edge coverage map that lives outside the snapshotted guest state."""

from __future__ import annotations

import enum
import zlib

import numpy as np

MAP_SIZE = 1 << 16
FEEDBACK_SLOTS = 64


class Novelty(enum.IntEnum):
    NONE = 0
    NEW_BUCKET = 1
    NEW_EDGE = 2


def _bucket_table() -> np.ndarray:
    # hit count -> single bucket bit: 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128+
    t = np.zeros(256, dtype=np.uint8)
    t[1], t[2], t[3] = 1, 2, 4
    t[4:8] = 8
    t[8:16] = 16
    t[16:32] = 32
    t[32:128] = 64
    t[128:] = 128
    return t


BUCKETS = _bucket_table()


def site_id(label: str) -> int:
    """Stable 16-bit id for a named branch point."""
    return zlib.crc32(label.encode()) & 0xFFFF


class CoverageMap:
    """Saturating 8-bit hit counters; the last 64 slots are reserved for maximisation feedback."""

    def __init__(self, size: int = MAP_SIZE):
        if size < 2 * FEEDBACK_SLOTS or size & (size - 1):
            raise ValueError("map size must be a power of two >= 128")
        self.size = size
        self.bits = bytearray(size)
        self._mask = size - 1
        self.touched: list[int] = []  # slots that went 0 -> nonzero, so merges skip the full scan

    @property
    def feedback_base(self) -> int:
        return self.size - FEEDBACK_SLOTS

    def record_edge(self, prev_loc: int, cur_loc: int) -> None:
        slot = (cur_loc ^ (prev_loc >> 1)) & self._mask
        v = self.bits[slot]
        if v == 0:
            self.touched.append(slot)
            self.bits[slot] = 1
        elif v < 255:
            self.bits[slot] = v + 1

    def set_feedback(self, bucket: int) -> None:
        """Mark a maximisation bucket as reached (bucket in [0, 64))."""
        slot = self.feedback_base + min(max(bucket, 0), FEEDBACK_SLOTS - 1)
        if self.bits[slot] == 0:
            self.touched.append(slot)
            self.bits[slot] = 1

    def view(self) -> np.ndarray:
        return np.frombuffer(self.bits, dtype=np.uint8)

    def clear(self) -> None:
        if len(self.touched) < 4096:
            bits = self.bits
            for slot in self.touched:
                bits[slot] = 0
        else:
            self.view_mut()[:] = 0
        self.touched = []

    def assign(self, other: CoverageMap) -> None:
        """Overwrite with the contents of ``other`` (same size)."""
        if other.size != self.size:
            raise ValueError("coverage maps differ in size")
        self.clear()
        bits, src = self.bits, other.bits
        for slot in other.touched:
            bits[slot] = src[slot]
        self.touched = list(other.touched)

    def view_mut(self) -> np.ndarray:
        return np.frombuffer(memoryview(self.bits), dtype=np.uint8)

    def digest(self) -> int:
        """Hash of the classified map; equal hashes mean equal coverage shape."""
        return zlib.crc32(BUCKETS[self.view()].tobytes())

    def edges(self) -> int:
        return int(np.count_nonzero(self.view()))

    def copy(self) -> CoverageMap:
        c = CoverageMap(self.size)
        c.bits[:] = self.bits
        c.touched = list(self.touched)
        return c


class GlobalCoverage:
    """Union of every classified bucket seen so far (AFL's virgin map, inverted)."""

    def __init__(self, size: int = MAP_SIZE):
        self.size = size
        self.seen = np.zeros(size, dtype=np.uint8)

    def edges_found(self) -> int:
        return int(np.count_nonzero(self.seen))

    def to_bytes(self) -> bytes:
        return self.seen.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> GlobalCoverage:
        g = cls(len(data))
        g.seen[:] = np.frombuffer(data, dtype=np.uint8)
        return g

    def merge_from(self, other: GlobalCoverage) -> None:
        np.bitwise_or(self.seen, other.seen, out=self.seen)


def cov_record_edge(cov: CoverageMap, prev_loc: int, cur_loc: int) -> None:
    cov.record_edge(prev_loc, cur_loc)


def cov_classify(cov: CoverageMap, glob: GlobalCoverage) -> Novelty:
    """Compare against ``glob`` without modifying either."""
    hit = BUCKETS[cov.view()]
    fresh = hit & ~glob.seen
    if not fresh.any():
        return Novelty.NONE
    if (fresh.astype(bool) & (glob.seen == 0)).any():
        return Novelty.NEW_EDGE
    return Novelty.NEW_BUCKET


def cov_merge_and_classify(cov: CoverageMap, glob: GlobalCoverage) -> Novelty:
    """Classify hit counts, fold them into ``glob`` and clear ``cov`` for the next run."""
    if cov.size != glob.size:
        raise ValueError("coverage map and global map differ in size")
    if not cov.touched:
        return Novelty.NONE
    # maps are sparse; only the slots hit this run are looked at
    idx = np.array(cov.touched, dtype=np.int64)
    hit = BUCKETS[cov.view()[idx]]
    seen = glob.seen[idx]
    fresh = hit & ~seen
    result = Novelty.NONE
    if fresh.any():
        result = Novelty.NEW_EDGE if ((fresh != 0) & (seen == 0)).any() else Novelty.NEW_BUCKET
        glob.seen[idx] = seen | hit
    cov.clear()
    return result
