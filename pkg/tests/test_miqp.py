import os

import numpy as np
import pytest
import scipy.sparse as sp

from mgcoord.miqp import (
    INFEASIBLE,
    ITER_LIMIT,
    OPTIMAL,
    UNBOUNDED,
    MiqpProblem,
    SolverOptions,
    TooManyBinaries,
    solve_convex,
    solve_miqp,
    write_lp,
)


def box_qp(c, quad=None, a=None, lb=None, ub=None, vlb=None, vub=None,
           binaries=(), const=0.0):
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    if a is None:
        a = sp.csc_matrix((0, n))
        lb = np.zeros(0)
        ub = np.zeros(0)
    else:
        a = sp.csc_matrix(np.atleast_2d(np.asarray(a, dtype=float)))
        lb = np.asarray(lb, dtype=float)
        ub = np.asarray(ub, dtype=float)
    return MiqpProblem(
        c=c, quad_diag=None if quad is None else np.asarray(quad, float),
        a_mat=a, row_lb=lb, row_ub=ub,
        var_lb=np.full(n, -np.inf) if vlb is None else np.asarray(vlb, float),
        var_ub=np.full(n, np.inf) if vub is None else np.asarray(vub, float),
        binaries=np.asarray(binaries, dtype=int), obj_const=const,
    )


def test_interior_qp_example():
    # min (x-1)^2 on [0, 3]
    p = box_qp([-2.0], quad=[2.0], vlb=[0.0], vub=[3.0], const=1.0)
    s = solve_convex(p)
    assert s.status == OPTIMAL
    assert s.x[0] == pytest.approx(1.0, abs=1e-7)
    assert s.objective_value == pytest.approx(0.0, abs=1e-9)


def test_degenerate_lp_face():
    p = box_qp([1.0, 1.0], a=[[1.0, 1.0]], lb=[1.0], ub=[np.inf],
               vlb=[0.0, 0.0], vub=[np.inf, np.inf])
    s = solve_convex(p)
    assert s.status == OPTIMAL
    assert s.objective_value == pytest.approx(1.0, abs=1e-8)


def test_statuses():
    infeas = box_qp([1.0], a=[[1.0]], lb=[2.0], ub=[np.inf], vub=[1.0])
    assert solve_convex(infeas).status == INFEASIBLE
    unbdd = box_qp([-1.0], vlb=[0.0])
    assert solve_convex(unbdd).status == UNBOUNDED


def _kkt_constructed_qp(rng, n, m):
    """Strictly convex QP whose optimum is known from a dense KKT solve of a
    chosen active set, verified by multiplier signs and slack margins."""
    quad = rng.uniform(0.5, 3.0, n)
    a = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    n_act = rng.integers(0, min(m, n) + 1)
    act = rng.choice(m, size=n_act, replace=False)
    b_act = a[act] @ x0
    # build the cost so that x0 with multipliers lam >= 0 satisfies KKT for
    # upper-active rows: quad*x0 + c + A_act' lam = 0
    lam = rng.uniform(0.1, 2.0, n_act)
    c = -(quad * x0) - a[act].T @ lam if n_act else -(quad * x0)
    ub = a @ x0 + rng.uniform(0.5, 2.0, m)
    ub[act] = b_act
    lb = np.full(m, -np.inf)
    prob = MiqpProblem(
        c=c, quad_diag=quad, a_mat=sp.csc_matrix(a), row_lb=lb, row_ub=ub,
        var_lb=np.full(n, -np.inf), var_ub=np.full(n, np.inf),
    )
    obj = 0.5 * float(quad @ (x0 * x0)) + float(c @ x0)
    return prob, x0, obj


def test_random_qps_match_dense_kkt_oracle():
    rng = np.random.default_rng(42)
    for _ in range(60):
        n = int(rng.integers(2, 20))
        m = int(rng.integers(1, 12))
        prob, x0, obj = _kkt_constructed_qp(rng, n, m)
        s = solve_convex(prob)
        assert s.status == OPTIMAL
        assert abs(s.objective_value - obj) < 1e-6


def test_milp_big_m_example():
    # min x + 10 d  s.t. x >= 1 - 100 d, x >= 0, d binary
    p = box_qp([1.0, 10.0], a=[[1.0, 100.0]], lb=[1.0], ub=[np.inf],
               vlb=[0.0, 0.0], vub=[np.inf, 1.0], binaries=[1])
    for backend in ("enumerate", "branch_and_bound"):
        s = solve_miqp(p, backend=backend)
        assert s.status == OPTIMAL
        assert s.objective_value == pytest.approx(1.0, abs=1e-8)
        assert s.x[1] == 0.0


def test_no_binaries_equals_convex():
    p = box_qp([-2.0], quad=[2.0], vlb=[0.0], vub=[3.0], const=1.0)
    s1 = solve_miqp(p)
    s2 = solve_convex(p)
    assert s1.objective_value == pytest.approx(s2.objective_value, abs=1e-12)


def random_milp(rng):
    n = int(rng.integers(3, 10))
    nb = int(rng.integers(1, min(6, n)))
    m = int(rng.integers(2, 8))
    a = rng.normal(size=(m, n))
    xb = rng.integers(0, 2, nb).astype(float)
    xc = rng.normal(size=n - nb)
    x0 = np.concatenate([xb, xc])
    b = a @ x0
    lb = b - rng.uniform(0.2, 2.0, m)
    ub = b + rng.uniform(0.2, 2.0, m)
    quad = rng.uniform(0.1, 2.0, n) if rng.random() < 0.3 else None
    return MiqpProblem(
        c=rng.normal(size=n), quad_diag=quad, a_mat=sp.csc_matrix(a),
        row_lb=lb, row_ub=ub,
        var_lb=np.concatenate([np.zeros(nb), xc - 2]),
        var_ub=np.concatenate([np.ones(nb), xc + 2]),
        binaries=np.arange(nb),
    )


def test_backend_agreement_sample():
    rng = np.random.default_rng(5)
    for _ in range(40):
        p = random_milp(rng)
        s1 = solve_miqp(p, backend="enumerate")
        s2 = solve_miqp(p, backend="branch_and_bound")
        assert s1.status == s2.status
        if s1.status == OPTIMAL:
            assert abs(s1.objective_value - s2.objective_value) < 1e-6
            assert np.all(np.isin(s2.x[p.binaries], (0.0, 1.0)))


def test_relaxation_lower_bounds_miqp():
    rng = np.random.default_rng(9)
    for _ in range(20):
        p = random_milp(rng)
        relax = solve_convex(p)
        mixed = solve_miqp(p, backend="enumerate")
        if relax.status == OPTIMAL and mixed.status == OPTIMAL:
            assert relax.objective_value <= mixed.objective_value + 1e-7


def test_determinism():
    rng = np.random.default_rng(13)
    p = random_milp(rng)
    s1 = solve_miqp(p, backend="branch_and_bound")
    s2 = solve_miqp(p, backend="branch_and_bound")
    assert s1.status == s2.status
    if s1.status == OPTIMAL:
        assert np.array_equal(s1.x, s2.x)
        assert s1.objective_value == s2.objective_value


def test_enumeration_cap():
    n = 31
    p = MiqpProblem(
        c=np.zeros(n), a_mat=sp.csc_matrix((0, n)),
        row_lb=np.zeros(0), row_ub=np.zeros(0),
        var_lb=np.zeros(n), var_ub=np.ones(n), binaries=np.arange(n),
    )
    with pytest.raises(TooManyBinaries):
        solve_miqp(p, backend="enumerate")


def test_tie_break_prefers_lowest_assignment():
    # both binary values yield the same objective; the all-zero assignment
    # (lowest as a binary integer) must win in both backends
    p = box_qp([0.0, 0.0], a=[[1.0, 0.0]], lb=[0.0], ub=[1.0],
               vlb=[0.0, 0.0], vub=[1.0, 1.0], binaries=[0, 1])
    for backend in ("enumerate", "branch_and_bound"):
        s = solve_miqp(p, backend=backend)
        assert s.status == OPTIMAL
        assert np.array_equal(s.x, [0.0, 0.0])


def test_lp_dump(tmp_path):
    p = box_qp([1.0, 2.0], quad=[0.0, 1.0], a=[[1.0, 1.0]], lb=[1.0],
               ub=[2.0], vlb=[0.0, 0.0], vub=[5.0, 5.0], binaries=[0])
    path = os.path.join(tmp_path, "prob.lp")
    write_lp(p, path, name="toy")
    text = open(path).read()
    assert "Minimize" in text and "Subject To" in text
    assert "Binaries" in text and "x0" in text
    assert "End" in text


def test_solver_options_respected():
    p = box_qp([-2.0], quad=[2.0], vlb=[0.0], vub=[3.0], const=1.0)
    s = solve_convex(p, SolverOptions(max_iter=1, polish=False,
                                      check_every=1, lp_backend="splitting"))
    assert s.status in (ITER_LIMIT, OPTIMAL)
