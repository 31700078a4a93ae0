import pytest

from snapfuzz.bytecode import GraphBuilder
from snapfuzz.guest import Guest, make_target
from snapfuzz.seeds import default_spec


@pytest.fixture(scope="session")
def spec():
    return default_spec()


@pytest.fixture
def builder(spec):
    return GraphBuilder(spec)


def session(spec, lines, snapshot_after=None):
    """One connection carrying ``lines`` as packets."""
    b = GraphBuilder(spec)
    c = b.con_open()
    for i, line in enumerate(lines):
        if snapshot_after is not None and i == snapshot_after:
            b.snapshot()
        b.pkt(c, line)
    return b.build()


@pytest.fixture
def ftp(spec):
    guest, _ = Guest.boot(make_target("ftp_like"), spec)
    return guest


@pytest.fixture
def longprefix(spec):
    guest, _ = Guest.boot(make_target("longprefix"), spec)
    return guest


@pytest.fixture
def platformer(spec):
    guest, _ = Guest.boot(make_target("platformer"), spec)
    return guest


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
CRITERIA = {
    1: "incremental-execution equivalence",
    2: "throughput amortization",
    3: "restore-cost scaling",
    4: "policy conformance",
    5: "planted-bug discovery",
    6: "platformer policy benefit",
    7: "snapshot memory sharing",
    8: "format robustness",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        ok, detail = ACCEPTANCE.get(n, (False, "not run or did not finish"))
        terminalreporter.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
