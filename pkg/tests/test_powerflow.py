import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgcoord.network import Bus, Line, PerUnitBase, RadialNetwork, load_network
from mgcoord.powerflow import (
    DimensionMismatch,
    DistFlowState,
    LinearizationPoint,
    NoConvergence,
    OperatingLimits,
    ZeroVoltage,
    check_limits,
    distflow_residuals,
    linearize_current,
    newton_raphson_loadflow,
    state_from_loadflow,
    violations_to_records,
)

BASE = PerUnitBase(12.66e3, 1e6)


def two_bus(r=0.01, x=0.01):
    buses = [
        Bus(0, False, np.array([0.0]), np.array([0.0])),
        Bus(1, False, np.array([0.1]), np.array([0.05])),
    ]
    return RadialNetwork(buses, [Line(0, 0, 1, r, x, 1.2)], root=0, base=BASE)


@pytest.fixture(scope="module")
def net33():
    return load_network("data/ieee33.net")


def zero_state(net):
    return DistFlowState(
        p_flow=np.zeros(net.n_line), q_flow=np.zeros(net.n_line),
        p_inj=np.zeros(net.n_bus), q_inj=np.zeros(net.n_bus),
        v_sq=np.ones(net.n_bus), i_sq=np.zeros(net.n_line),
    )


def test_residuals_zero_for_no_load():
    net = two_bus()
    res = distflow_residuals(net, zero_state(net))
    for arr in res.values():
        assert np.abs(arr).max() == 0.0


def test_residuals_perturbation_bookkeeping():
    net = two_bus(r=0.02, x=0.03)
    s = zero_state(net)
    s.i_sq[0] += 0.1
    res = distflow_residuals(net, s)
    assert res["current"][0] == pytest.approx(-0.1)
    assert res["voltage_drop"][0] == pytest.approx(-0.1 * (0.02**2 + 0.03**2))


def test_residuals_dimension_mismatch():
    net = two_bus()
    s = zero_state(net)
    s.p_flow = np.zeros(3)
    with pytest.raises(DimensionMismatch):
        distflow_residuals(net, s)


def test_linearize_current_example():
    lp = LinearizationPoint.from_point([0.5], [0.2], [1.0])
    assert lp.i_sq_star[0] == pytest.approx(0.29)
    a, b, c, const = linearize_current(lp)
    assert a[0] == pytest.approx(1.0)
    assert b[0] == pytest.approx(0.4)
    assert c[0] == pytest.approx(-0.29)
    # affine form reproduces the expansion point exactly
    val = a[0] * 0.5 + b[0] * 0.2 + c[0] * 1.0 + const[0]
    assert val == pytest.approx(0.29, abs=1e-15)


def test_linearize_zero_flow():
    a, b, c, const = linearize_current(LinearizationPoint.flat(3))
    assert np.all(a == 0) and np.all(b == 0) and np.all(c == 0)
    assert np.all(const == 0)


def test_linearize_zero_voltage_guard():
    lp = LinearizationPoint.from_point([0.1], [0.1], [0.2])
    with pytest.raises(ZeroVoltage):
        linearize_current(lp)


@settings(max_examples=100)
@given(
    p=st.floats(-1.5, 1.5),
    q=st.floats(-1.5, 1.5),
    v=st.floats(0.7, 1.21),
)
def test_taylor_anchoring_property(p, q, v):
    lp = LinearizationPoint.from_point([p], [q], [v])
    a, b, c, const = linearize_current(lp)
    val = a[0] * p + b[0] * q + c[0] * v + const[0]
    assert val == pytest.approx(lp.i_sq_star[0], abs=1e-12)


def test_nr_no_load_flat():
    net = two_bus()
    res = newton_raphson_loadflow(net, np.zeros(2, dtype=complex), 1.0)
    assert res.iterations == 1
    assert np.allclose(res.v_mag, 1.0)


def _sweep_oracle_two_bus(z, s_load, slack, iters=60):
    # independent fixed-point iteration: V2 = slack - z * conj(S_load / V2)
    v2 = slack + 0j
    for _ in range(iters):
        v2 = slack - z * np.conj(s_load / v2)
    return v2


def test_nr_two_bus_against_sweep_oracle():
    net = two_bus(0.01, 0.01)
    inj = np.array([0.0, -(0.1 + 0.05j)])
    res = newton_raphson_loadflow(net, inj, 1.0)
    v2 = _sweep_oracle_two_bus(0.01 + 0.01j, 0.1 + 0.05j, 1.0)
    assert abs(res.v_mag[1] - abs(v2)) < 1e-10
    assert res.v_mag[1] == pytest.approx(0.99849, abs=1e-3)


def test_nr_33_bus_peak_within_5pct(net33):
    # with the scenario's 22% peak loading the feeder holds the +-5% band
    inj = -(0.22 * net33.p_load_peak + 1j * 0.22 * net33.q_load_peak)
    inj[net33.root] = 0
    res = newton_raphson_loadflow(net33, inj, 1.0)
    assert res.v_mag.min() >= 0.95 and res.v_mag.max() <= 1.05


def test_nr_mismatch_monotone_tail(net33):
    inj = -(net33.p_load_peak + 1j * net33.q_load_peak)
    inj[net33.root] = 0
    res = newton_raphson_loadflow(net33, inj, 1.0)
    tail = res.mismatch_trace[-3:]
    assert all(tail[i + 1] < tail[i] for i in range(len(tail) - 1))


def test_nr_no_convergence():
    net = two_bus(0.5, 0.5)
    inj = np.array([0.0, -(5.0 + 5.0j)])  # far beyond loadability
    with pytest.raises(NoConvergence):
        newton_raphson_loadflow(net, inj, 1.0)


def test_distflow_agrees_with_nr(net33):
    inj = -(net33.p_load_peak + 1j * net33.q_load_peak)
    inj[net33.root] = 0
    res = newton_raphson_loadflow(net33, inj, 1.0)
    st_ = state_from_loadflow(net33, res, inj)
    r = distflow_residuals(net33, st_)
    worst = max(np.abs(v).max() for v in r.values())
    assert worst < 1e-8


def test_check_limits_cases():
    net = two_bus()
    lim = OperatingLimits.from_network(net)
    s = zero_state(net)
    assert check_limits(s, lim) == []

    s.p_flow[0] = 1.2  # the full apparent rating exceeds s_max / sqrt(2)
    out = check_limits(s, lim)
    assert [v.kind for v in out] == ["p_flow"]

    s2 = zero_state(net)
    s2.v_sq[1] = 0.9025 - 1e-12
    out = check_limits(s2, lim)
    assert [(v.kind, v.index) for v in out] == [("v_low", 1)]
    assert "v_low 1" in violations_to_records(out)


def test_check_limits_skip_bus():
    net = two_bus()
    lim = OperatingLimits.from_network(net)
    s = zero_state(net)
    s.v_sq[0] = 1.21
    assert check_limits(s, lim, skip_bus=[0]) == []
