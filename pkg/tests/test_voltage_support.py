import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import assume, given, settings, strategies as st

from mgcoord.miqp import MiqpProblem, solve_convex
from mgcoord.voltage_support import (
    AS_BINARY_LOCALS,
    AsParameters,
    ExchangePoint,
    InvalidBigM,
    NoFeasibleAssignment,
    NonpositiveZeta,
    VoltageSupportError,
    _IPEX,
    _IQEX,
    build_as_block,
    min_penalty_lp,
    verify_reformulation,
    zone_boundary,
    zone_oracle,
)

PARAMS = AsParameters(p_min=1.0, q_min=0.33, tan_phi=0.3287, c_p=5.0, m_p=72.0)


def test_parameters_validation():
    with pytest.raises(VoltageSupportError):
        AsParameters(p_min=-1.0, q_min=0.33, tan_phi=0.33, c_p=5.0, m_p=10.0)
    with pytest.raises(VoltageSupportError):
        # transformer short-circuit bound: |q_min| <= 10% of 2 pu
        AsParameters(p_min=1.0, q_min=0.5, tan_phi=0.33, c_p=5.0, m_p=10.0,
                     v_tr_pct=10.0, s_tr=2.0)
    assert PARAMS.consistency_warning is None
    skew = AsParameters(p_min=1.0, q_min=0.40, tan_phi=0.3287, c_p=5.0, m_p=72.0)
    assert skew.consistency_warning is not None


def test_zone_oracle_examples():
    assert zone_oracle(ExchangePoint(0.0, 0.0), PARAMS) == (1, 0.0)
    zone, cost = zone_oracle(ExchangePoint(2.0, 1.0), PARAMS)
    assert zone == 2
    assert cost == pytest.approx(5.0 * (1.0 - 2.0 * 0.3287))
    assert zone_oracle(ExchangePoint(0.5, 0.2), PARAMS) == (1, 0.0)


def test_zone_oracle_boundary_is_free():
    q_lim = float(zone_boundary(2.0, PARAMS))
    assert zone_oracle(ExchangePoint(2.0, q_lim), PARAMS) == (1, 0.0)
    zone, cost = zone_oracle(ExchangePoint(2.0, q_lim + 1e-9), PARAMS)
    assert zone == 2 and cost > 0


def test_zone_oracle_exports_cost_free():
    # exporting is never penalized, matching the constraint block
    zone, cost = zone_oracle(ExchangePoint(-1.0, 1.5), PARAMS)
    assert zone == 1 and cost == 0.0


def test_block_shape():
    blk = build_as_block(0, PARAMS)
    assert blk.rows.shape[0] == 17
    assert blk.n_binaries == 3


def test_block_validation_errors():
    with pytest.raises(NonpositiveZeta):
        build_as_block(0, AsParameters(p_min=1.0, q_min=0.33, tan_phi=0.3287,
                                       c_p=5.0, m_p=72.0, zeta=0.0))
    with pytest.raises(InvalidBigM):
        build_as_block(0, AsParameters(p_min=1.0, q_min=0.33, tan_phi=0.3287,
                                       c_p=5.0, m_p=1.0))


def _restriction_lp(blk, assignment, pex, qex):
    g = blk.rows
    shift = (g[:, 3] * assignment[0] + g[:, 4] * assignment[1]
             + g[:, 5] * assignment[2] + g[:, _IPEX] * pex + g[:, _IQEX] * qex)
    return MiqpProblem(
        c=np.array([1.0, 0.0, 0.0]),
        a_mat=sp.csc_matrix(g[:, :3]),
        row_lb=blk.row_lb - shift, row_ub=blk.row_ub - shift,
        var_lb=np.full(3, -np.inf), var_ub=np.full(3, np.inf),
    )


def test_restriction_zone1_cone_feasible_zero_cost():
    # importing above threshold, inside the cone, zone-1 assignment
    blk = build_as_block(0, PARAMS)
    pex, qex = 2.0, 0.5  # |q| <= 2 * 0.3287
    sol = solve_convex(_restriction_lp(blk, (0, 1, 0), pex, qex))
    assert sol.status == "optimal"
    assert sol.objective_value == pytest.approx(0.0, abs=1e-9)


def test_restriction_zone1_flag_infeasible_outside():
    blk = build_as_block(0, PARAMS)
    pex, qex = 2.0, 1.0  # violates the cone
    sol = solve_convex(_restriction_lp(blk, (0, 1, 0), pex, qex))
    assert sol.status == "infeasible"


def test_verify_grid_origin():
    assert verify_reformulation(PARAMS, [(0.0, 0.0)]) == pytest.approx(0.0, abs=1e-9)


def test_verify_boundary_point():
    q_lim = float(zone_boundary(2.0, PARAMS))
    dev = verify_reformulation(PARAMS, [(2.0, q_lim)])
    assert dev < 1e-6


def test_verify_coarse_grid():
    grid = [(p, q) for p in np.linspace(-2, 3, 21) for q in np.linspace(-2, 2, 21)]
    assert verify_reformulation(PARAMS, grid) < 1e-6


def test_no_feasible_assignment_signals_bug():
    blk_params = AsParameters(p_min=1.0, q_min=0.33, tan_phi=0.3287,
                              c_p=5.0, m_p=72.0)
    # a point far beyond the Big-M budget cannot be represented
    with pytest.raises(NoFeasibleAssignment):
        verify_reformulation(blk_params, [(100.0, 0.0)])


def _min_cost_over_assignments(pex, qex, params=PARAMS):
    blk = build_as_block(0, params)
    best = None
    for code in range(8):
        asg = ((code >> 0) & 1, (code >> 1) & 1, (code >> 2) & 1)
        val = min_penalty_lp(blk, asg, pex, qex)
        if val is not None and (best is None or val < best):
            best = val
    return None if best is None else params.c_p * max(best, 0.0)


@settings(max_examples=120, deadline=None)
@given(pex=st.floats(-2.0, 3.0), qex=st.floats(-2.0, 2.0))
def test_equivalence_property(pex, qex):
    # soundness, completeness, and penalty tightness in one comparison;
    # points within solver tolerance of the tariff's own discontinuities
    # (the export edge and the threshold corner) are excluded
    assume(abs(pex) > 1e-6 and abs(pex - PARAMS.p_min) > 1e-6)
    milp = _min_cost_over_assignments(pex, qex)
    assert milp is not None
    _, oracle = zone_oracle(ExchangePoint(pex, qex), PARAMS)
    assert milp == pytest.approx(oracle, abs=1e-6)


def test_binary_semantics():
    blk = build_as_block(0, PARAMS)

    def feasible_assignments(pex, qex):
        out = []
        for code in range(8):
            asg = ((code >> 0) & 1, (code >> 1) & 1, (code >> 2) & 1)
            if min_penalty_lp(blk, asg, pex, qex) is not None:
                out.append(asg)
        return out

    # export flag tracks the sign of the active exchange strictly
    for asg in feasible_assignments(1.5, 0.1):
        assert asg[0] == 0
    for asg in feasible_assignments(-1.5, 0.1):
        assert asg[0] == 1
    # below-threshold flag forces the rectangle branch
    for asg in feasible_assignments(0.3, 0.1):
        assert asg[2] == 1
    for asg in feasible_assignments(2.5, 0.1):
        assert asg[2] == 0


def test_boundary_variable_band_when_below_threshold():
    # with the below-threshold flag set, the boundary stays within
    # [q_min, q_min + zeta]
    blk = build_as_block(0, PARAMS)
    g = blk.rows
    pex, qex = 0.3, 0.5  # zone 2 in the rectangle region
    shift = g[:, 5] * 1.0 + g[:, _IPEX] * pex + g[:, _IQEX] * qex
    prob = MiqpProblem(
        c=np.array([0.0, -1.0, 0.0]),  # maximize qlim
        a_mat=sp.csc_matrix(g[:, :3]),
        row_lb=blk.row_lb - shift, row_ub=blk.row_ub - shift,
        var_lb=np.full(3, -np.inf), var_ub=np.full(3, np.inf),
    )
    sol = solve_convex(prob)
    assert sol.status == "optimal"
    q_lim_max = sol.x[1]
    assert PARAMS.q_min - 1e-9 <= q_lim_max <= PARAMS.q_min + PARAMS.zeta + 1e-9
