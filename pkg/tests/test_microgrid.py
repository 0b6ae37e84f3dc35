import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from mgcoord.microgrid import (
    BessSpec,
    HorizonMismatch,
    InverterSpec,
    MicrogridError,
    MicrogridSpec,
    PowerOutOfRange,
    bess_step,
    build_mg_constraints,
    pwl_circle,
)
from mgcoord.miqp import MiqpProblem, solve_convex

BESS = BessSpec.from_capacity(600.0, 100.0, 0.225, beta_b=0.1519)


def mg_spec(pv, load_p, omega=None, e_init=300.0, s_inv=250.0):
    pv = np.atleast_1d(np.asarray(pv, float))
    load_p = np.atleast_1d(np.asarray(load_p, float))
    omega = omega if omega is not None else float(np.arccos(0.8))
    return MicrogridSpec(
        bus=4, bess=BESS, inverter=InverterSpec(s_inv, 16),
        pv_forecast=pv, load_forecast_p=load_p,
        load_forecast_q=load_p * np.tan(omega),
        load_ac_p=0.5 * load_p, omega=omega, e_init=e_init,
    )


def test_bess_spec_bounds():
    assert BESS.e_min == pytest.approx(120.0)
    assert BESS.e_max == pytest.approx(540.0)
    with pytest.raises(MicrogridError):
        BessSpec(capacity=100, e_min=90, e_max=80, p_min=-10, p_max=10, eta=0.2)


def test_bess_step_examples():
    assert bess_step(300.0, 100.0, BESS) == pytest.approx(277.5)
    assert bess_step(123.4, 0.0, BESS) == 123.4
    # charging at full power from a nearly full store breaks the band
    e_next = bess_step(530.0, -100.0, BESS)
    assert e_next == pytest.approx(552.5)
    assert e_next > BESS.e_max  # schedule infeasible, caller's constraint
    with pytest.raises(PowerOutOfRange):
        bess_step(300.0, 250.0, BESS)


@settings(max_examples=60)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=12))
def test_energy_telescoping(powers):
    e = 300.0
    for p in powers:
        e = bess_step(e, p, BESS)
    assert e == pytest.approx(300.0 - BESS.eta * sum(powers), rel=1e-12)


def test_pwl_rows_example():
    rows = pwl_circle(InverterSpec(1.0, 16))
    a, b, c = rows[0]
    assert a == pytest.approx(0.07612, abs=1e-5)
    assert b == pytest.approx(0.38268, abs=1e-5)
    assert c == pytest.approx(-0.38268, abs=1e-5)


def test_pwl_origin_inside():
    for l in (4, 8, 16, 32):
        rows = pwl_circle(InverterSpec(2.0, l))
        assert (rows[:, 2] < 0).all()


def test_pwl_polygon_geometry_oracle():
    # vertices from adjacent half-plane intersections lie exactly on the
    # rated circle; edge midpoints at radius s*cos(pi/l)
    s, l = 2.5, 16
    rows = pwl_circle(InverterSpec(s, l))
    for j in range(l):
        a1, b1, c1 = rows[j]
        a2, b2, c2 = rows[(j + 1) % l]
        v = np.linalg.solve([[a1, b1], [a2, b2]], [-c1, -c2])
        assert np.hypot(*v) == pytest.approx(s, abs=1e-9)
        assert -c1 / np.hypot(a1, b1) == pytest.approx(s * np.cos(np.pi / l))


@settings(max_examples=80)
@given(p=st.floats(-3, 3), q=st.floats(-3, 3))
def test_pwl_inner_approximation(p, q):
    s = 2.5
    rows = pwl_circle(InverterSpec(s, 16))
    if (rows[:, 0] * p + rows[:, 1] * q + rows[:, 2] <= 0).all():
        assert p * p + q * q <= s * s + 1e-9


def _solve_mg(spec, horizon, pin=None, objective=None):
    cs = build_mg_constraints(spec, horizon)
    n = cs.rows.shape[1]
    lb = cs.var_lb.copy()
    ub = cs.var_ub.copy()
    for name_k, val in (pin or {}).items():
        name, k = name_k
        j = cs.col(k, name)
        lb[j] = ub[j] = val
    c = np.zeros(n)
    for name_k, coef in (objective or {}).items():
        name, k = name_k
        c[cs.col(k, name)] = coef
    prob = MiqpProblem(c=c, a_mat=sp.csc_matrix(cs.rows), row_lb=cs.row_lb,
                       row_ub=cs.row_ub, var_lb=lb, var_ub=ub)
    return cs, solve_convex(prob)


def test_dead_microgrid_unique_zero():
    # zero generation and load with an idle battery and inverter leaves the
    # only feasible injection pair at the origin
    spec = mg_spec([0.0], [0.0], e_init=300.0)
    cs, sol = _solve_mg(spec, 1, pin={("p_bat", 0): 0.0, ("q_inv", 0): 0.0})
    assert sol.status == "optimal"
    assert sol.x[cs.col(0, "p_inj")] == pytest.approx(0.0, abs=1e-8)
    assert sol.x[cs.col(0, "q_inj")] == pytest.approx(0.0, abs=1e-8)


def test_balance_export_example():
    # generation 400, load 150, idle battery, no curtailment -> export 250
    spec = mg_spec([400.0], [150.0], s_inv=500.0)
    cs, sol = _solve_mg(spec, 1, pin={("p_bat", 0): 0.0, ("p_curt", 0): 0.0})
    assert sol.status == "optimal"
    assert sol.x[cs.col(0, "p_inj")] == pytest.approx(250.0, abs=1e-7)


def test_full_curtailment_reactive_credit():
    # curtailing the whole load credits reactive power at tan(omega) = 0.75
    spec = mg_spec([0.0], [100.0])
    cs, sol = _solve_mg(
        spec, 1,
        pin={("p_bat", 0): 0.0, ("p_curt", 0): 100.0, ("q_inv", 0): 10.0},
    )
    assert sol.status == "optimal"
    q_load = 100.0 * np.tan(np.arccos(0.8))
    want = 10.0 + 0.75 * 100.0 - q_load
    assert sol.x[cs.col(0, "q_inj")] == pytest.approx(want, abs=1e-7)


def test_curtailment_capped_by_load():
    spec = mg_spec([0.0, 0.0], [50.0, 80.0])
    cs = build_mg_constraints(spec, 2)
    assert cs.var_ub[cs.col(0, "p_curt")] == 50.0
    assert cs.var_ub[cs.col(1, "p_curt")] == 80.0
    assert cs.var_lb[cs.col(0, "p_curt")] == 0.0


def test_energy_chain_rows():
    spec = mg_spec([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], e_init=200.0)
    cs, sol = _solve_mg(
        spec, 3,
        pin={("p_bat", 0): 100.0, ("p_bat", 1): -50.0, ("p_bat", 2): 0.0},
    )
    assert sol.status == "optimal"
    e = 200.0
    for k, p in enumerate((100.0, -50.0, 0.0)):
        e = bess_step(e, p, spec.bess)
        assert sol.x[cs.col(k, "e")] == pytest.approx(e, abs=1e-7)


def test_horizon_mismatch():
    spec = mg_spec([0.0], [0.0])
    with pytest.raises(HorizonMismatch):
        build_mg_constraints(spec, 5)


def test_inverter_rating_binds_pv():
    # PV beyond the inverter plus battery headroom is infeasible
    spec = mg_spec([400.0], [0.0], s_inv=250.0)
    cs, sol = _solve_mg(spec, 1)
    assert sol.status == "infeasible"
    # battery absorbing at full power brings it back inside
    spec2 = mg_spec([340.0], [0.0], s_inv=250.0)
    cs2, sol2 = _solve_mg(spec2, 1, pin={("p_bat", 0): -100.0})
    assert sol2.status == "optimal"
