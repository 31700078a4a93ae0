"""Root run vs. prefix + incremental run, compared on every observable."""

from snapfuzz.coverage import CoverageMap


def observe(guest, cov, res):
    mem, aux = guest.export_state()
    return {"mem": mem, "aux": aux.blob, "cov": bytes(cov.bits), "exit": res.exit, "site": res.crash_site}


def from_root(guest, program):
    cov = CoverageMap()
    res = guest.execute(program.stripped(), cov)
    return observe(guest, cov, res)


def split_run(guest, program, k):
    """Prefix up to op ``k`` from the root, snapshot, then the rest from the snapshot."""
    marked = program.with_snapshot(k)
    cov = CoverageMap()
    res = guest.execute(marked, cov, create_incremental=True, stop_at_snapshot=True)
    if not res.snapshot_created:
        # the target stopped inside the prefix; nothing to resume
        return observe(guest, cov, res)
    prefix_cov = cov.copy()
    cov = CoverageMap()
    cov.assign(prefix_cov)
    res = guest.execute(marked, cov, from_incremental=True)
    out = observe(guest, cov, res)
    guest.discard_incremental()
    return out


def mismatches(guest, program):
    """Fields that differ, per snapshot index; empty when equivalent for every k."""
    want = from_root(guest, program)
    bad = []
    for k in range(1, len(program.ops)):
        got = split_run(guest, program, k)
        diff = [key for key in want if got[key] != want[key]]
        if diff:
            bad.append((k, diff))
    return bad
