"""Hypercall-style driver for simulated targets.

A target is stateless code. Everything it needs to remember between steps
is kept in the guest's paged memory or in the aux blob (socket tables,
step counter, RNG state, previous coverage location), which is what makes
root and incremental snapshots exact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from snapfuzz.bytecode import BytecodeProgram, FormatSpec
from snapfuzz.coverage import CoverageMap, site_id
from snapfuzz.emu_net import EmuNet
from snapfuzz.paged_state import (
    AuxState,
    IncrementalSnapshot,
    PagedMemory,
    RootSnapshot,
    SnapshotError,
    inc_create,
    inc_restore,
    memory_from_root,
    mem_create,
    root_create,
    root_restore,
)
from snapfuzz.wire import Reader, Writer

DEFAULT_OP_BUDGET = 1_000_000
_AUX_VERSION = 1

SEGV_SITE = site_id("segv")


class Step(enum.Enum):
    CONTINUE = 0
    BLOCK = 1  # waiting for input: the "ready" hypercall
    DONE = 2


class TargetCrash(Exception):
    def __init__(self, site: int, detail: str = ""):
        super().__init__(f"crash at site {site:#06x} {detail}".strip())
        self.site = site


class BootError(RuntimeError):
    pass


class Exit(str, enum.Enum):
    FINISHED = "finished"
    CRASH = "crash"
    TIMEOUT = "timeout"
    SNAPSHOT = "snapshot"  # stopped at the snapshot marker on request


@dataclass(frozen=True)
class ExecResult:
    exit: Exit
    ops_executed: int
    packets_consumed: int
    bytes_delivered: int
    crash_site: int | None = None
    snapshot_created: bool = False
    packets_total: int = 0  # consumed since the root, prefix included

    @property
    def crashed(self) -> bool:
        return self.exit is Exit.CRASH


class Context:
    """What a target sees: memory, the emulated network, coverage, and a few counters."""

    def __init__(self, mem: PagedMemory):
        self.mem = mem
        self.net = EmuNet()
        self.cov: CoverageMap | None = None
        self.steps = 0
        self.prev_loc = 0
        self.rng_state = 0x9E3779B97F4A7C15

    def edge(self, site: int) -> None:
        if self.cov is not None:
            self.cov.record_edge(self.prev_loc, site)
        self.prev_loc = site

    def feedback(self, bucket: int) -> None:
        if self.cov is not None:
            self.cov.set_feedback(bucket)

    def tick(self, n: int) -> None:
        """Charge extra work to the step budget."""
        self.steps += n

    def rand(self) -> int:
        x = self.rng_state
        x ^= (x << 13) & 0xFFFFFFFFFFFFFFFF
        x ^= x >> 7
        x ^= (x << 17) & 0xFFFFFFFFFFFFFFFF
        self.rng_state = x
        return x

    def read(self, addr: int, n: int) -> bytes:
        return self.mem.read(addr, n)

    def write(self, addr: int, data: bytes) -> None:
        self.mem.write(addr, data)

    def get(self, addr: int, size: int = 4) -> int:
        return int.from_bytes(self.mem.read(addr, size), "little")

    def put(self, addr: int, value: int, size: int = 4) -> None:
        self.mem.write(addr, (value & ((1 << (8 * size)) - 1)).to_bytes(size, "little"))

    def to_aux(self) -> AuxState:
        w = Writer().u8(_AUX_VERSION)
        w.u64(self.steps).u32(self.prev_loc).u64(self.rng_state)
        w.blob(self.net.to_bytes())
        return AuxState(w.getvalue())

    def load_aux(self, aux: AuxState) -> None:
        r = Reader(aux.blob)
        if r.u8() != _AUX_VERSION:
            raise SnapshotError("unsupported aux state version")
        self.steps, self.prev_loc, self.rng_state = r.u64(), r.u32(), r.u64()
        self.net = EmuNet.from_bytes(r.blob())
        r.expect_end()


class Target:
    """Base class for simulated targets. Subclasses implement :meth:`step`."""

    name = "target"
    num_pages = 64
    page_size = 4096
    recv_size = 256

    def step(self, ctx: Context) -> Step:
        raise NotImplementedError

    def objective(self, ctx: Context) -> bool:
        """Whether the last run reached the target's goal state, if it has one."""
        return False


class Guest:
    def __init__(self, target: Target, spec: FormatSpec, root: RootSnapshot, mem: PagedMemory | None = None):
        self.target = target
        self.spec = spec
        self.root = root
        self.mem = mem if mem is not None else memory_from_root(root)
        self.ctx = Context(self.mem)
        self.ctx.load_aux(root.aux)
        self.inc: IncrementalSnapshot | None = None
        self._inc_prefix: tuple | None = None
        self._inc_recycle: IncrementalSnapshot | None = None
        self.inc_created = 0
        self._open_nodes = {i for i, n in enumerate(spec.nodes) if n.produces and not n.borrows}
        self._packet_nodes = {i for i, n in enumerate(spec.nodes) if n.borrows and n.data is not None}
        self.status = "awaiting-input"

    # ---- lifecycle -------------------------------------------------------

    @classmethod
    def boot(cls, target: Target, spec: FormatSpec, budget: int = DEFAULT_OP_BUDGET) -> tuple[Guest, RootSnapshot]:
        """Run target init up to its first wait for input, then take the root snapshot there."""
        mem = mem_create(target.num_pages, target.page_size)
        ctx = Context(mem)
        while True:
            try:
                step = target.step(ctx)
            except TargetCrash as e:
                raise BootError(f"{target.name} crashed during boot: {e}") from e
            except IndexError as e:
                raise BootError(f"{target.name} faulted during boot: {e}") from e
            ctx.steps += 1
            if ctx.steps > budget:
                raise BootError(f"{target.name} exceeded the boot budget of {budget} steps")
            if step is Step.BLOCK:
                break
            if step is Step.DONE:
                raise BootError(f"{target.name} exited during boot")
        # boot work is not charged to test cases
        ctx.steps = 0
        ctx.prev_loc = 0
        root = root_create(mem, ctx.to_aux())
        guest = cls(target, spec, root, mem)
        return guest, root

    @classmethod
    def from_root(cls, target: Target, spec: FormatSpec, root: RootSnapshot) -> Guest:
        """Another worker on the same shared root; only the live memory is allocated."""
        return cls(target, spec, root)

    def export_state(self) -> tuple[bytes, AuxState]:
        return self.mem.data.tobytes(), self.ctx.to_aux()

    # ---- execution -------------------------------------------------------

    def _run_target(self, budget: int):
        ctx = self.ctx
        step_fn = self.target.step
        while True:
            try:
                step = step_fn(ctx)
            except TargetCrash as e:
                return Exit.CRASH, e.site
            except IndexError:
                return Exit.CRASH, SEGV_SITE
            ctx.steps += 1
            if step is Step.BLOCK:
                return None, None
            if step is Step.DONE:
                return Exit.FINISHED, None
            if ctx.steps > budget:
                return Exit.TIMEOUT, None

    def _apply_op(self, i: int, op) -> None:
        net = self.ctx.net
        if op.node in self._open_nodes:
            net.open_connection(i)
        elif op.node in self._packet_nodes:
            net.deliver(op.refs[0], op.payload)

    def execute(
        self,
        program: BytecodeProgram,
        cov: CoverageMap | None = None,
        *,
        from_incremental: bool = False,
        create_incremental: bool = False,
        stop_at_snapshot: bool = False,
        op_budget: int = DEFAULT_OP_BUDGET,
    ) -> ExecResult:
        """Run one test case.

        From the root, every op runs; if ``create_incremental`` is set and the
        program carries a snapshot marker at ``k``, an incremental snapshot is
        taken once the first ``k`` ops have been handled. From the incremental
        snapshot only ops ``k..`` run, and ops ``0..k`` must match the prefix
        the snapshot was built from.
        """
        ctx = self.ctx
        k = program.snapshot_index
        if from_incremental:
            if self.inc is None or k is None:
                raise SnapshotError("no incremental snapshot to start from")
            if program.ops[:k] != self._inc_prefix:
                raise SnapshotError("program prefix differs from the incremental snapshot's prefix")
            inc_restore(self.mem, self.inc)
            ctx.load_aux(self.inc.aux)
            start = k
        else:
            root_restore(self.mem, self.root)
            ctx.load_aux(self.root.aux)
            start = 0
        ctx.cov = cov
        net = ctx.net
        consumed0, bytes0 = net.packets_consumed, net.bytes_consumed
        created = False
        executed = 0

        def result(exit_, site=None):
            self.status = {Exit.CRASH: "crashed", Exit.FINISHED: "done"}.get(exit_, "awaiting-input")
            return ExecResult(
                exit_, executed, net.packets_consumed - consumed0, net.bytes_consumed - bytes0, site, created,
                net.packets_consumed,
            )

        ops = program.ops
        for i in range(start, len(ops)):
            if i == k and create_incremental and not from_incremental:
                self._take_incremental(program)
                created = True
                if stop_at_snapshot:
                    return result(Exit.SNAPSHOT)
            self._apply_op(i, ops[i])
            executed += 1
            exit_, site = self._run_target(op_budget)
            if exit_ is not None:
                return result(exit_, site)
        net.finish()
        exit_, site = self._run_target(op_budget)
        return result(exit_ or Exit.FINISHED, site)

    def _take_incremental(self, program: BytecodeProgram) -> None:
        k = program.snapshot_index
        self.inc = inc_create(self.mem, self.root, self.ctx.to_aux(), self._inc_recycle)
        self._inc_recycle = self.inc
        self._inc_prefix = program.ops[:k]
        self.inc_created += 1

    def discard_incremental(self) -> None:
        """Drop the active incremental snapshot; its storage is kept for recycling."""
        self.inc = None
        self._inc_prefix = None
