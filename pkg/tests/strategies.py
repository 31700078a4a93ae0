"""Hypothesis strategies shared by the test modules."""

from hypothesis import strategies as st

from snapfuzz.bytecode import BytecodeProgram, Op

CON_OPEN, PKT = 0, 1  # node ids in the bundled network spec


@st.composite
def programs(draw, min_ops=1, max_ops=12, payload=None, with_snapshot=False):
    """Valid programs over the network spec: a connection first, then packets and more connections."""
    if payload is None:
        payload = st.binary(min_size=1, max_size=24)
    n = draw(st.integers(min_ops, max_ops))
    ops = [Op(CON_OPEN)]
    conns = [0]
    for i in range(1, n):
        if draw(st.integers(0, 5)) == 0:
            ops.append(Op(CON_OPEN))
            conns.append(i)
        else:
            ops.append(Op(PKT, (draw(st.sampled_from(conns)),), draw(payload)))
    k = None
    if with_snapshot and n > 1:
        k = draw(st.none() | st.integers(1, n - 1))
    return BytecodeProgram(tuple(ops), k)
