import numpy as np
import pytest
from hypothesis import given, strategies as st

from mgcoord.network import (
    Bus,
    CycleDetected,
    DisconnectedBus,
    DuplicateLine,
    Line,
    MissingRoot,
    NonpositiveBase,
    PerUnitBase,
    RadialNetwork,
    from_per_unit,
    load_network,
    parse_network,
    to_per_unit,
)

BASE = PerUnitBase(v_base=12.66e3, s_base=1e6)


def two_bus_doc(extra_lines=""):
    return f"""
[base]
v_base_kv = 12.66
s_base_kva = 1000
root = 0

[buses]
0 0 0
1 100 60

[lines]
0 1 1.6026 1.6026 1000
{extra_lines}
"""


def test_two_bus_doc():
    net = parse_network(two_bus_doc())
    assert net.n_bus == 2 and net.n_line == 1
    assert net.ancestor[1] == 0
    assert list(net.children[0]) == [1]
    # 1.6026 ohm on a 160.2756 ohm base
    assert net.lines[0].r == pytest.approx(1.6026 / BASE.z_base)


def test_fixture_33_bus():
    net = load_network("data/ieee33.net")
    assert net.n_bus == 33
    assert net.n_line == 32
    assert set(net.source_ids[net.mg_buses]) == {5, 9, 19, 21, 24}
    assert net.source_ids[net.root] == 1


def test_cycle_detected():
    doc = """
[base]
v_base_kv = 12.66
s_base_kva = 1000
root = 1

[buses]
1 0 0
2 10 5

[lines]
1 2 0.1 0.1 100
2 1 0.1 0.1 100
"""
    with pytest.raises(CycleDetected):
        parse_network(doc)


def test_detached_cycle_detected():
    doc = """
[base]
v_base_kv = 12.66
s_base_kva = 1000
root = 0

[buses]
0 0 0
1 10 5
2 10 5

[lines]
1 2 0.1 0.1 100
2 1 0.1 0.1 100
"""
    with pytest.raises(CycleDetected):
        parse_network(doc)


def test_disconnected_bus():
    doc = """
[base]
v_base_kv = 12.66
s_base_kva = 1000
root = 0

[buses]
0 0 0
1 10 5
2 10 5

[lines]
0 1 0.1 0.1 100
"""
    with pytest.raises(DisconnectedBus):
        parse_network(doc)


def test_duplicate_line():
    with pytest.raises(DuplicateLine):
        parse_network(two_bus_doc("0 1 0.2 0.2 1000"))


def test_missing_root():
    doc = two_bus_doc().replace("root = 0\n", "")
    with pytest.raises(MissingRoot):
        parse_network(doc)


def test_tree_invariants_33():
    net = load_network("data/ieee33.net")
    assert net.n_line == net.n_bus - 1
    for b in range(net.n_bus):
        if b == net.root:
            assert net.ancestor[b] == -1
        else:
            a = net.ancestor[b]
            assert b in net.children[a]
    # traversal from the root reaches every bus once
    assert sorted(net.topo_order.tolist()) == list(range(net.n_bus))


def test_per_unit_examples():
    assert to_per_unit(1200e3, PerUnitBase(12.66e3, 1000e3), "power") == pytest.approx(1.2)
    assert to_per_unit(12.66e3, PerUnitBase(12.66e3, 1000e3), "voltage") == pytest.approx(1.0)


def test_nonpositive_base():
    with pytest.raises(NonpositiveBase):
        PerUnitBase(v_base=0.0, s_base=1e6)
    with pytest.raises(NonpositiveBase):
        PerUnitBase(v_base=1e3, s_base=-1.0)


@given(
    raw=st.floats(min_value=1e-6, max_value=1e9),
    kind=st.sampled_from(["power", "voltage", "impedance"]),
    v=st.floats(min_value=1e2, max_value=1e6),
    s=st.floats(min_value=1e2, max_value=1e9),
)
def test_per_unit_round_trip(raw, kind, v, s):
    base = PerUnitBase(v_base=v, s_base=s)
    back = from_per_unit(to_per_unit(raw, base, kind), base, kind)
    assert back == pytest.approx(raw, rel=1e-12)


def test_programmatic_network_validation():
    buses = [
        Bus(0, False, np.array([0.0]), np.array([0.0])),
        Bus(1, False, np.array([0.1]), np.array([0.05])),
    ]
    lines = [Line(0, 0, 1, 0.01, 0.01, 1.0)]
    net = RadialNetwork(buses, lines, root=0, base=BASE)
    assert net.line_of_bus[1] == 0
    with pytest.raises(MissingRoot):
        RadialNetwork(buses, lines, root=7, base=BASE)
