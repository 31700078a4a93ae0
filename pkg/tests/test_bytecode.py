import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from strategies import programs

from snapfuzz.bytecode import (
    MAGIC,
    BytecodeProgram,
    GraphBuilder,
    Op,
    ProgramError,
    SpecError,
    program_decode,
    program_parse,
    program_serialize,
    program_validate,
    spec_parse,
)

LISTING = """
handle e_con
data d_bytes
node con_open produces=e_con
node pkt borrows=e_con data=d_bytes
"""


def test_spec_parse_listing():
    spec = spec_parse(LISTING)
    assert [n.name for n in spec.nodes] == ["con_open", "pkt"]
    assert spec.node("pkt").borrows == ("e_con",)
    assert spec.node("pkt").is_packet and not spec.node("con_open").is_packet


@pytest.mark.parametrize("text", [
    "",
    "handle e_con\n",
    "handle e_con\nnode pkt borrows=e_missing",
    "data d\nnode pkt data=d_missing",
    "handle a\nhandle a\nnode x produces=a",
    "node x colour=red",
    "frobnicate x",
])
def test_spec_parse_errors(text):
    with pytest.raises(SpecError):
        spec_parse(text)


def test_builder_two_ops(builder, spec):
    c = builder.call("con_open")
    builder.call("pkt", [c], b"GET /")
    p = builder.build()
    assert p.ops == (Op(spec.node_id("con_open")), Op(spec.node_id("pkt"), (0,), b"GET /"))
    assert program_parse(spec, program_serialize(p)) == p


def test_builder_interleaved_connections(builder):
    c1 = builder.con_open()
    c2 = builder.con_open()
    builder.pkt(c2, b"to two")
    builder.pkt(c1, b"to one")
    p = builder.build()
    assert [op.refs for op in p.ops] == [(), (), (1,), (0,)]
    assert [op.payload for op in p.ops[2:]] == [b"to two", b"to one"]


def test_builder_errors(spec):
    b = GraphBuilder(spec)
    with pytest.raises(ProgramError):
        b.build()
    other = GraphBuilder(spec)
    foreign = other.con_open()
    with pytest.raises(ValueError):
        b.pkt(foreign, b"x")
    with pytest.raises(TypeError):
        b.call("pkt", [], b"x")
    twin = spec_parse(LISTING + "handle e_file\nnode file_open produces=e_file\n")
    tb = GraphBuilder(twin)
    f = tb.file_open()
    with pytest.raises(TypeError):
        tb.pkt(f, b"x")


def test_builder_snapshot(builder, spec):
    c = builder.con_open()
    builder.pkt(c, b"a")
    builder.snapshot()
    builder.pkt(c, b"b")
    p = builder.build()
    assert p.snapshot_index == 2
    assert program_parse(spec, p.serialize()) == p


def test_validate(spec):
    fwd = BytecodeProgram((Op(1, (1,), b"x"), Op(0)))
    assert any("forward reference" in v for v in program_validate(spec, fwd))
    ok = BytecodeProgram((Op(0), Op(1, (0,), b"x")))
    assert program_validate(spec, ok) == []
    assert program_validate(spec, ok.with_snapshot(2))
    assert program_validate(spec, ok.with_snapshot(0))
    assert program_validate(spec, BytecodeProgram((Op(7),)))
    assert program_validate(spec, BytecodeProgram((Op(0, (), b"payload"),)))


def test_truncated_stream_is_rejected(spec, builder):
    c = builder.con_open()
    builder.pkt(c, b"USER anonymous\r\n")
    data = builder.build().serialize()
    for cut in range(len(data)):
        with pytest.raises(ProgramError):
            program_parse(spec, data[:cut])
    with pytest.raises(ProgramError):
        program_parse(spec, data + b"\0")


def test_marker_rules():
    two_markers = MAGIC + (2).to_bytes(4, "little") + (b"\xff\xff" + bytes(6)) * 2
    with pytest.raises(ProgramError):
        program_decode(two_markers)


@settings(max_examples=300, deadline=None)
@given(programs(with_snapshot=True))
def test_round_trip(p):
    spec = spec_parse(LISTING)
    assert program_validate(spec, p) == []
    assert program_parse(spec, program_serialize(p)) == p


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=200))
def test_random_bytes_give_structured_errors(data):
    spec = spec_parse(LISTING)
    try:
        program_parse(spec, data)
    except ProgramError as e:
        assert e.violations
