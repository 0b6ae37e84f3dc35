"""Sparse LP/QP problem representation and self-contained solvers.

The convex path is an operator-splitting (ADMM-type) iteration on the
augmented KKT system with Ruiz diagonal scaling, warm starting, and a
direct-KKT polish step that lands on the exact active-set solution; primal
and dual infeasibility are detected from the iterate differences.  The
mixed-binary path offers best-first branch-and-bound and exhaustive
enumeration backends that agree to solver tolerance by construction.

Problems are stated as

    minimize    0.5 x' diag(quad) x + c' x + const
    subject to  row_lb <= A x <= row_ub,   var_lb <= x <= var_ub

with equality rows expressed as row_lb == row_ub.  Binary variables are an
index set; they participate as box-[0,1] continuous variables until fixed.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class MiqpError(ValueError):
    pass


class TooManyBinaries(MiqpError):
    pass


OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITER_LIMIT = "iter_limit"


@dataclass
class MiqpProblem:
    c: np.ndarray
    a_mat: sp.csc_matrix
    row_lb: np.ndarray
    row_ub: np.ndarray
    var_lb: np.ndarray
    var_ub: np.ndarray
    quad_diag: np.ndarray | None = None
    binaries: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    obj_const: float = 0.0
    names: list | None = None
    meta: dict | None = None

    @property
    def n(self) -> int:
        return int(self.c.shape[0])

    @property
    def m(self) -> int:
        return int(self.a_mat.shape[0])

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.a_mat = sp.csc_matrix(self.a_mat)
        self.row_lb = np.asarray(self.row_lb, dtype=float)
        self.row_ub = np.asarray(self.row_ub, dtype=float)
        self.var_lb = np.asarray(self.var_lb, dtype=float)
        self.var_ub = np.asarray(self.var_ub, dtype=float)
        self.binaries = np.asarray(self.binaries, dtype=int)
        n, m = self.n, self.m
        if self.a_mat.shape != (m, n):
            raise MiqpError("constraint matrix shape mismatch")
        for arr, want in ((self.row_lb, m), (self.row_ub, m),
                          (self.var_lb, n), (self.var_ub, n)):
            if arr.shape != (want,):
                raise MiqpError("bound vector shape mismatch")
        if self.quad_diag is not None:
            self.quad_diag = np.asarray(self.quad_diag, dtype=float)
            if self.quad_diag.shape != (n,):
                raise MiqpError("quadratic diagonal shape mismatch")
            if (self.quad_diag < -1e-12).any():
                raise MiqpError("quadratic term must be positive semidefinite")
        if self.binaries.size and (
            (self.binaries < 0).any() or (self.binaries >= n).any()
        ):
            raise MiqpError("binary index out of range")

    def objective_at(self, x: np.ndarray) -> float:
        val = float(self.c @ x) + self.obj_const
        if self.quad_diag is not None:
            val += 0.5 * float(self.quad_diag @ (x * x))
        return val


@dataclass
class Solution:
    x: np.ndarray
    objective_value: float
    status: str
    kkt_residuals: tuple
    iterations: int = 0
    binary_values: np.ndarray | None = None


@dataclass(frozen=True)
class SolverOptions:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 100_000
    sigma: float = 1e-6
    alpha: float = 1.6
    rho: float = 0.1
    rho_eq_scale: float = 1e3
    scaling_iters: int = 10
    check_every: int = 25
    polish: bool = True
    polish_every: int = 200
    eps_infeas: float = 1e-9
    adaptive_rho: bool = True
    max_rho_updates: int = 6
    max_nodes: int = 200_000
    lp_backend: str = "highs"  # "highs" routes pure LPs through scipy
    ipm_max_n: int = 600       # dense interior-point cap for small QPs


def _content_key(p_diag, a_mat, sigma, rho, rho_eq_scale):
    h = hashlib.sha1()
    h.update(p_diag.tobytes())
    h.update(a_mat.data.tobytes())
    h.update(a_mat.indices.tobytes())
    h.update(a_mat.indptr.tobytes())
    h.update(np.array([a_mat.shape[0], a_mat.shape[1]]).tobytes())
    h.update(np.array([sigma, rho, rho_eq_scale]).tobytes())
    return h.hexdigest()


class QpWorkspace:
    """Factorized solver state for one constraint structure.

    The KKT factorization depends only on (quad_diag, A, sigma, rho); calls
    with different costs and bounds reuse it, which is what makes
    branch-and-bound (bound changes only) and consensus iterations (cost
    changes only) cheap.
    """

    def __init__(self, quad_diag, a_rows: sp.csc_matrix, var_count: int,
                 eq_mask_rows: np.ndarray, options: SolverOptions):
        self.opts = options
        n = var_count
        self.n = n
        a_full = sp.vstack([a_rows, sp.identity(n, format="csc")], format="csc")
        self.m = a_full.shape[0]
        self.p_diag = (np.zeros(n) if quad_diag is None
                       else np.asarray(quad_diag, dtype=float))
        # equality rows get a stiffer penalty; variable-bound rows never are
        self.eq_mask = np.concatenate([eq_mask_rows, np.zeros(n, dtype=bool)])

        self._scale(a_full)
        self.rho_bar = options.rho
        self.rho_good = options.rho  # last value that produced a converged solve
        self._rho_updates = 0
        self._factorize()
        self._cost_scale_set = False

    # -- scaling -----------------------------------------------------------
    def _scale(self, a_full):
        opts = self.opts
        n, m = self.n, self.m
        d = np.ones(n)
        e = np.ones(m)
        a_s = a_full.copy().astype(float)
        p_s = self.p_diag.copy()
        for _ in range(opts.scaling_iters):
            a_abs = abs(a_s)
            col = np.asarray(a_abs.max(axis=0).todense()).ravel()
            col = np.maximum(col, p_s)  # P is diagonal
            col[col == 0] = 1.0
            dd = 1.0 / np.sqrt(col)
            row = np.asarray(a_abs.max(axis=1).todense()).ravel()
            row[row == 0] = 1.0
            de = 1.0 / np.sqrt(row)
            a_s = sp.diags(de) @ a_s @ sp.diags(dd)
            p_s = dd * p_s * dd
            d *= dd
            e *= de
        self.d = d
        self.e = e
        self.a_s = sp.csc_matrix(a_s)
        self.p_s = p_s
        self.cost_scale = 1.0

    def _factorize(self):
        rho_vec = np.where(self.eq_mask, self.rho_bar * self.opts.rho_eq_scale,
                           self.rho_bar)
        self.rho_vec = rho_vec
        kkt = sp.bmat(
            [
                [sp.diags(self.p_s * self.cost_scale + self.opts.sigma), self.a_s.T],
                [self.a_s, -sp.diags(1.0 / rho_vec)],
            ],
            format="csc",
        )
        self.lu = splu(kkt)

    def _set_cost_scale(self, q):
        # cost scaling from the current objective; refreshed whenever the
        # objective magnitude drifts far from the scaling in the factors
        norm = max(np.abs(q).max() if q.size else 0.0,
                   np.abs(self.p_s).max() if self.n else 0.0)
        self.cost_scale = 1.0 / max(norm, 1e-6) if norm > 0 else 1.0
        self._cost_scale_set = True
        self._factorize()

    def _maybe_refresh_cost_scale(self, q):
        norm = max(np.abs(q).max() if q.size else 0.0,
                   np.abs(self.p_s).max() if self.n else 0.0)
        desired = 1.0 / max(norm, 1e-6) if norm > 0 else 1.0
        ratio = desired / self.cost_scale
        if ratio > 10.0 or ratio < 0.1:
            self.cost_scale = desired
            self._factorize()

    # -- main solve --------------------------------------------------------
    def solve(self, c, lb_full, ub_full, warm=None, polish_hook=None):
        """Solve with the stored structure; bounds are the stacked
        (rows, variables) vectors.  Returns a raw result dict.

        polish_hook, when given, is tried periodically on the running
        iterate; if it certifies an exact solution the iteration stops
        early (first-order steps only need to identify the active set)."""
        opts = self.opts
        n, m = self.n, self.m
        q_s = self.d * np.asarray(c, dtype=float)
        if not self._cost_scale_set:
            self._set_cost_scale(q_s)
        else:
            self._maybe_refresh_cost_scale(q_s)
        q_s = q_s * self.cost_scale
        # per-solve adaptation budget; drop any rho tuned by a diverging solve
        self._rho_updates = 0
        if self.rho_bar != self.rho_good:
            self.rho_bar = self.rho_good
            self._factorize()
        self._l_cache = np.asarray(lb_full, dtype=float)
        self._u_cache = np.asarray(ub_full, dtype=float)
        l_s = self.e * self._l_cache
        u_s = self.e * self._u_cache

        if warm is not None and warm[0] is not None:
            x = warm[0] / self.d
            if warm[1] is not None:
                y_s = warm[1] * self.e * self.cost_scale
            else:
                y_s = np.zeros(m)
            z = np.clip(self.a_s @ x, l_s, u_s)
        else:
            x = np.zeros(n)
            y_s = np.zeros(m)
            z = np.clip(np.zeros(m), l_s, u_s)

        sigma = opts.sigma
        alpha = opts.alpha
        rho_vec = self.rho_vec
        status = ITER_LIMIT
        r_p = r_d = np.inf
        y_prev = y_s.copy()
        x_prev = x.copy()

        it = 0
        while it < opts.max_iter:
            it += 1
            rhs = np.concatenate([sigma * x - q_s, z - y_s / rho_vec])
            sol = self.lu.solve(rhs)
            x_t = sol[:n]
            nu = sol[n:]
            z_t = z + (nu - y_s) / rho_vec
            x = alpha * x_t + (1 - alpha) * x
            z_arg = alpha * z_t + (1 - alpha) * z + y_s / rho_vec
            z_new = np.clip(z_arg, l_s, u_s)
            y_s = rho_vec * (z_arg - z_new)
            z = z_new

            if it % opts.check_every == 0 or it == opts.max_iter:
                r_p, r_d, eps_p, eps_d, nrm_p, nrm_d = self._residuals(
                    x, z, y_s, q_s
                )
                if r_p <= eps_p and r_d <= eps_d:
                    status = OPTIMAL
                    break
                flag = self._certificates(x - x_prev, y_s - y_prev, q_s)
                if flag is not None:
                    status = flag
                    break
                if polish_hook is not None and it % opts.polish_every == 0:
                    got = polish_hook({
                        "x": self.d * x,
                        "y": self.e * y_s / self.cost_scale,
                        "z": z / self.e,
                        "c": np.asarray(c, dtype=float),
                        "lb": self._l_cache, "ub": self._u_cache,
                        "r_prim": r_p,
                    })
                    if got is not None:
                        self.rho_good = self.rho_bar
                        return {
                            "x": got[0], "y": got[1], "z": z / self.e,
                            "status": OPTIMAL, "iterations": it,
                            "r_prim": got[2], "r_dual": got[3],
                            "lb": self._l_cache, "ub": self._u_cache,
                            "c": np.asarray(c, dtype=float),
                            "polished": True,
                        }
                if (opts.adaptive_rho and self._rho_updates < opts.max_rho_updates
                        and it >= 50):
                    self._maybe_rescale_rho(r_p, r_d, nrm_p, nrm_d)
                    rho_vec = self.rho_vec
                y_prev = y_s.copy()
                x_prev = x.copy()

        if status == OPTIMAL:
            self.rho_good = self.rho_bar
        x_orig = self.d * x
        y_orig = self.e * y_s / self.cost_scale
        return {
            "x": x_orig, "y": y_orig, "z": z / self.e,
            "status": status, "iterations": it,
            "r_prim": r_p, "r_dual": r_d,
            "lb": np.asarray(lb_full, dtype=float),
            "ub": np.asarray(ub_full, dtype=float),
            "c": np.asarray(c, dtype=float),
        }

    def _residuals(self, x, z, y_s, q_s):
        opts = self.opts
        ax = self.a_s @ x
        r_p_s = ax - z
        r_d_s = self.p_s * self.cost_scale * x + q_s + self.a_s.T @ y_s
        # residuals and tolerances in unscaled units
        r_p = np.abs(r_p_s / self.e).max() if r_p_s.size else 0.0
        r_d = np.abs(r_d_s / (self.d * self.cost_scale)).max() if r_d_s.size else 0.0
        ax_u = np.abs(ax / self.e).max() if ax.size else 0.0
        z_u = np.abs(z / self.e).max() if z.size else 0.0
        eps_p = opts.eps_abs + opts.eps_rel * max(ax_u, z_u)
        px_u = np.abs(self.p_s * x / self.d).max() if x.size else 0.0
        aty_u = np.abs((self.a_s.T @ y_s) / (self.d * self.cost_scale)).max()
        q_u = np.abs(q_s / (self.d * self.cost_scale)).max() if q_s.size else 0.0
        eps_d = opts.eps_abs + opts.eps_rel * max(px_u, aty_u, q_u)
        return r_p, r_d, eps_p, eps_d, max(ax_u, z_u), max(px_u, aty_u, q_u)

    def _maybe_rescale_rho(self, r_p, r_d, nrm_p, nrm_d):
        rel_p = r_p / max(nrm_p, 1e-12)
        rel_d = r_d / max(nrm_d, 1e-12)
        ratio = np.sqrt(max(rel_p, 1e-30) / max(rel_d, 1e-30))
        if ratio > 5.0 or ratio < 0.2:
            self.rho_bar = float(np.clip(self.rho_bar * ratio, 1e-6, 1e6))
            self._rho_updates += 1
            self._factorize()

    def _certificates(self, dx, dy_s, q_s):
        opts = self.opts
        # primal infeasibility from the dual direction
        dy = self.e * dy_s / self.cost_scale
        ndy = np.abs(dy).max() if dy.size else 0.0
        if ndy > 1e-14:
            aty = np.abs((self.a_s.T @ dy_s) / (self.d * self.cost_scale)).max()
            if aty <= opts.eps_infeas * ndy:
                up = np.maximum(dy, 0.0)
                dn = np.minimum(dy, 0.0)
                if (up[np.isinf(self._u_cache)] <= opts.eps_infeas * ndy).all() and (
                    np.abs(dn[np.isinf(self._l_cache)]) <= opts.eps_infeas * ndy
                ).all():
                    fin_u = np.where(np.isinf(self._u_cache), 0.0, self._u_cache)
                    fin_l = np.where(np.isinf(self._l_cache), 0.0, self._l_cache)
                    support = float(fin_u @ up + fin_l @ dn)
                    if support <= -opts.eps_infeas * ndy:
                        return INFEASIBLE
        # dual infeasibility from the primal direction
        dxu = self.d * dx
        ndx = np.abs(dxu).max() if dxu.size else 0.0
        if ndx > 1e-14:
            pdx = np.abs(self.p_s * dx / self.d).max() if dx.size else 0.0
            qdx = float((q_s / (self.d * self.cost_scale)) @ dxu)
            if pdx <= opts.eps_infeas * ndx and qdx <= -opts.eps_infeas * ndx:
                adx = (self.a_s @ dx) / self.e
                ok_up = np.isinf(self._u_cache) | (adx <= opts.eps_infeas * ndx)
                ok_dn = np.isinf(self._l_cache) | (adx >= -opts.eps_infeas * ndx)
                if ok_up.all() and ok_dn.all():
                    return UNBOUNDED
        return None


def _polish(prob: MiqpProblem, raw: dict, opts: SolverOptions,
            require_certificate: bool = False):
    """Direct KKT solve on the detected active set; returns an improved
    (x, y, r_p, r_d) or None if validation fails.

    Active rows are picked by dual sign or bound proximity (finite bounds
    only).  A candidate is accepted when it is primal feasible, stationary,
    and not worse than the iterate it refines; degenerate active sets may
    leave sign-inconsistent dual splits on near-dependent row pairs, which
    is tolerated unless a certificate is required (used when rescuing an
    unconverged solve, where dual signs are the optimality evidence).  A
    few rounds drop wrong-signed actives if the direct solve fails.
    """
    n = prob.n
    a_full = sp.vstack([prob.a_mat, sp.identity(n, format="csc")], format="csc")
    lb, ub = raw["lb"], raw["ub"]
    y = raw["y"]
    z = raw["z"]
    p_diag = prob.quad_diag if prob.quad_diag is not None else np.zeros(n)

    def objective(x):
        return float(raw["c"] @ x) + 0.5 * float(p_diag @ (x * x))

    raw_obj = objective(raw["x"])
    tol = max(opts.eps_abs, 1e-9)
    r_prim = raw.get("r_prim", 0.0)
    prox = min(max(10.0 * (r_prim if np.isfinite(r_prim) else 0.0), 1e-7), 1e-3)
    fin_l = np.isfinite(lb)
    fin_u = np.isfinite(ub)
    eq = (lb == ub) & fin_l
    near_l = fin_l & (z - lb <= prox * (1.0 + np.abs(lb)))
    near_u = fin_u & (ub - z <= prox * (1.0 + np.abs(ub)))
    low = fin_l & ~eq & ((y < -tol) | near_l)
    up = fin_u & ~eq & ((y > tol) | near_u) & ~low

    scale = 1.0 + max(np.abs(lb[fin_l]).max() if fin_l.any() else 0.0,
                      np.abs(ub[fin_u]).max() if fin_u.any() else 0.0)
    obj_tol = 10.0 * tol * (1.0 + abs(raw_obj))

    prev_viol = np.inf
    stagnant = 0
    for _ in range(30):
        act = np.flatnonzero(eq | low | up)
        if act.size > 6000:
            return None
        a_act = a_full[act]
        b_act = np.where(eq[act] | low[act], lb[act], ub[act])
        delta = 1e-9
        kkt = sp.bmat(
            [[sp.diags(p_diag + delta), a_act.T],
             [a_act, -delta * sp.identity(act.size)]],
            format="csc",
        )
        rhs = np.concatenate([-raw["c"], b_act])
        try:
            lu = splu(kkt)
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        kkt0 = sp.bmat([[sp.diags(p_diag), a_act.T], [a_act, None]], format="csc")
        for _ in range(3):
            sol = sol + lu.solve(rhs - kkt0 @ sol)
        if not np.isfinite(sol).all():
            return None
        x = sol[:n]
        y_act = sol[n:]

        y_new = np.zeros_like(y)
        y_new[act] = y_act
        ax = a_full @ x
        viol_lo = lb - ax
        viol_hi = ax - ub
        r_p = float(np.maximum(np.maximum(viol_lo, viol_hi), 0.0).max()) if ax.size else 0.0
        r_d_vec = p_diag * x + raw["c"] + a_full.T @ y_new
        r_d = float(np.abs(r_d_vec).max()) if r_d_vec.size else 0.0
        wrong_low = low[act] & (y_act > tol)
        wrong_up = up[act] & (y_act < -tol)
        signs_ok = not (wrong_low.any() or wrong_up.any())
        feasible = r_p <= tol * scale and r_d <= 10 * tol * scale
        improved = objective(x) <= raw_obj + obj_tol

        if feasible and signs_ok:
            return x, y_new, r_p, r_d
        if feasible and improved and not require_certificate:
            return x, y_new, r_p, r_d

        changed = False
        if wrong_low.any() or wrong_up.any():
            low[act[wrong_low]] = False
            up[act[wrong_up]] = False
            changed = True
        add_lo = np.flatnonzero(fin_l & ~eq & ~low & (viol_lo > tol * scale))
        add_hi = np.flatnonzero(fin_u & ~eq & ~up & (viol_hi > tol * scale))
        if add_lo.size or add_hi.size:
            low[add_lo] = True
            up[add_hi] = True
            up[add_lo] = False
            low[add_hi] = False
            changed = True
        if not changed:
            return None
        if r_p >= prev_viol * 0.9:
            stagnant += 1
            if stagnant >= 5:
                return None
        else:
            stagnant = 0
        prev_viol = max(r_p, 1e-300)
    return None


def _solve_lp_scipy(prob: MiqpProblem, var_lb, var_ub) -> Solution | None:
    """Pure-LP route through scipy's HiGHS backend; None if unavailable."""
    try:
        from scipy.optimize import linprog
    except ImportError:  # pragma: no cover
        return None
    lb = prob.var_lb if var_lb is None else var_lb
    ub = prob.var_ub if var_ub is None else var_ub
    eq = prob.row_lb == prob.row_ub
    a = prob.a_mat
    a_eq = a[eq] if eq.any() else None
    b_eq = prob.row_lb[eq] if eq.any() else None
    ineq = ~eq
    ub_rows = ineq & np.isfinite(prob.row_ub)
    lb_rows = ineq & np.isfinite(prob.row_lb)
    blocks = []
    rhs = []
    if ub_rows.any():
        blocks.append(a[ub_rows])
        rhs.append(prob.row_ub[ub_rows])
    if lb_rows.any():
        blocks.append(-a[lb_rows])
        rhs.append(-prob.row_lb[lb_rows])
    a_ub = sp.vstack(blocks, format="csc") if blocks else None
    b_ub = np.concatenate(rhs) if rhs else None
    res = linprog(
        prob.c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
        bounds=np.column_stack([lb, ub]), method="highs",
    )
    if res.status == 2:
        return Solution(x=np.zeros(prob.n), objective_value=float("nan"),
                        status=INFEASIBLE, kkt_residuals=(np.inf, np.inf))
    if res.status == 3:
        return Solution(x=np.zeros(prob.n), objective_value=float("-inf"),
                        status=UNBOUNDED, kkt_residuals=(np.inf, np.inf))
    if res.status != 0 or res.x is None:
        return None
    x = np.asarray(res.x, dtype=float)
    ax = a @ x
    r_p = float(np.maximum(np.maximum(prob.row_lb - ax, ax - prob.row_ub),
                           0.0).max()) if ax.size else 0.0
    sol = Solution(x=x, objective_value=prob.objective_at(x), status=OPTIMAL,
                   kkt_residuals=(r_p, 0.0),
                   iterations=int(getattr(res, "nit", 0)))
    sol._raw_y = None
    return sol


def _solve_qp_ipm(prob: MiqpProblem, var_lb, var_ub, warm=None,
                  tol: float = 1e-9, max_iter: int = 60) -> Solution | None:
    """Dense predictor-corrector interior-point solve for small QPs.

    Inequality rows get slack pairs on their finite sides; equality rows
    enter an augmented saddle system.  Returns None when the iteration does
    not certify an optimum (callers fall back to the splitting path, which
    also owns infeasibility detection)."""
    n = prob.n
    lbv = prob.var_lb if var_lb is None else var_lb
    ubv = prob.var_ub if var_ub is None else var_ub
    a_full = np.vstack([prob.a_mat.toarray(), np.eye(n)]) if prob.m else np.eye(n)
    lb = np.concatenate([prob.row_lb, lbv])
    ub = np.concatenate([prob.row_ub, ubv])
    q_diag = prob.quad_diag if prob.quad_diag is not None else np.zeros(n)
    c = prob.c

    eq = np.isfinite(lb) & (lb == ub)
    lo = np.isfinite(lb) & ~eq
    hi = np.isfinite(ub) & ~eq
    a_eq = a_full[eq]
    b_eq = lb[eq]
    a_lo = a_full[lo]
    b_lo = lb[lo]
    a_hi = a_full[hi]
    b_hi = ub[hi]
    n_eq, n_lo, n_hi = a_eq.shape[0], a_lo.shape[0], a_hi.shape[0]
    if n_lo + n_hi == 0 and n_eq == 0:
        if (q_diag <= 0).any():
            return None
        x = -c / q_diag
        return Solution(x=x, objective_value=prob.objective_at(x),
                        status=OPTIMAL, kkt_residuals=(0.0, 0.0), iterations=0)

    x = np.zeros(n) if warm is None or warm[0] is None else warm[0].copy()
    bad = ~np.isfinite(x)
    if bad.any():
        x[bad] = 0.0
    s_lo = np.maximum(a_lo @ x - b_lo, 1.0) if n_lo else np.zeros(0)
    s_hi = np.maximum(b_hi - a_hi @ x, 1.0) if n_hi else np.zeros(0)
    y_lo = np.ones(n_lo)
    y_hi = np.ones(n_hi)
    y_eq = np.zeros(n_eq)

    scale = 1.0 + max(
        np.abs(c).max() if c.size else 0.0,
        np.abs(b_eq).max() if n_eq else 0.0,
        np.abs(b_lo).max() if n_lo else 0.0,
        np.abs(b_hi).max() if n_hi else 0.0,
    )

    for it in range(1, max_iter + 1):
        r_d = q_diag * x + c + (a_hi.T @ y_hi if n_hi else 0.0) \
            - (a_lo.T @ y_lo if n_lo else 0.0) \
            + (a_eq.T @ y_eq if n_eq else 0.0)
        r_lo = (a_lo @ x - s_lo - b_lo) if n_lo else np.zeros(0)
        r_hi = (a_hi @ x + s_hi - b_hi) if n_hi else np.zeros(0)
        r_eq = (a_eq @ x - b_eq) if n_eq else np.zeros(0)
        gap = (float(s_lo @ y_lo) + float(s_hi @ y_hi))
        n_comp = max(n_lo + n_hi, 1)
        mu = gap / n_comp
        r_norm = max(
            np.abs(r_d).max() if r_d.size else 0.0,
            np.abs(r_lo).max() if n_lo else 0.0,
            np.abs(r_hi).max() if n_hi else 0.0,
            np.abs(r_eq).max() if n_eq else 0.0,
        )
        if r_norm <= tol * scale and mu <= tol * scale:
            obj = prob.objective_at(x)
            sol = Solution(x=x.copy(), objective_value=obj, status=OPTIMAL,
                           kkt_residuals=(float(r_norm), float(mu)),
                           iterations=it)
            y_stack = np.zeros(lb.shape[0])
            if n_lo:
                y_stack[np.flatnonzero(lo)] -= y_lo
            if n_hi:
                y_stack[np.flatnonzero(hi)] += y_hi
            if n_eq:
                y_stack[np.flatnonzero(eq)] = y_eq
            sol._raw_y = y_stack
            return sol
        if not np.isfinite(r_norm) or r_norm > 1e12 * scale:
            return None

        w_lo = y_lo / s_lo if n_lo else np.zeros(0)
        w_hi = y_hi / s_hi if n_hi else np.zeros(0)
        m = np.diag(q_diag + 1e-12)
        if n_lo:
            m += (a_lo.T * w_lo) @ a_lo
        if n_hi:
            m += (a_hi.T * w_hi) @ a_hi

        def solve_newton(rc_lo, rc_hi):
            rhs = -r_d
            if n_lo:
                rhs += a_lo.T @ (rc_lo / s_lo - w_lo * r_lo)
            if n_hi:
                rhs -= a_hi.T @ (rc_hi / s_hi + w_hi * r_hi)
            if n_eq:
                kkt = np.zeros((n + n_eq, n + n_eq))
                kkt[:n, :n] = m
                kkt[:n, n:] = a_eq.T
                kkt[n:, :n] = a_eq
                kkt[n:, n:] = -1e-12 * np.eye(n_eq)
                full = np.concatenate([rhs, -r_eq])
                try:
                    sol_v = np.linalg.solve(kkt, full)
                except np.linalg.LinAlgError:
                    return None
                dx, dy_eq = sol_v[:n], sol_v[n:]
            else:
                try:
                    dx = np.linalg.solve(m, rhs)
                except np.linalg.LinAlgError:
                    return None
                dy_eq = np.zeros(0)
            ds_lo = (a_lo @ dx + r_lo) if n_lo else np.zeros(0)
            ds_hi = (-r_hi - a_hi @ dx) if n_hi else np.zeros(0)
            dy_lo = ((rc_lo - y_lo * ds_lo) / s_lo) if n_lo else np.zeros(0)
            dy_hi = ((rc_hi - y_hi * ds_hi) / s_hi) if n_hi else np.zeros(0)
            return dx, ds_lo, ds_hi, dy_lo, dy_hi, dy_eq

        def max_step(v, dv):
            neg = dv < 0
            if not neg.any():
                return 1.0
            return min(1.0, float((-v[neg] / dv[neg]).min()))

        aff = solve_newton(-s_lo * y_lo if n_lo else np.zeros(0),
                           -s_hi * y_hi if n_hi else np.zeros(0))
        if aff is None:
            return None
        dx_a, ds_lo_a, ds_hi_a, dy_lo_a, dy_hi_a, _ = aff
        alpha_p = min(max_step(s_lo, ds_lo_a), max_step(s_hi, ds_hi_a))
        alpha_d = min(max_step(y_lo, dy_lo_a), max_step(y_hi, dy_hi_a))
        gap_aff = (float((s_lo + alpha_p * ds_lo_a) @ (y_lo + alpha_d * dy_lo_a))
                   if n_lo else 0.0)
        gap_aff += (float((s_hi + alpha_p * ds_hi_a) @ (y_hi + alpha_d * dy_hi_a))
                    if n_hi else 0.0)
        mu_aff = gap_aff / n_comp
        sigma = (mu_aff / max(mu, 1e-300)) ** 3 if mu > 0 else 0.1
        sigma = min(max(sigma, 1e-8), 1.0)

        rc_lo = (-s_lo * y_lo - ds_lo_a * dy_lo_a + sigma * mu) if n_lo else np.zeros(0)
        rc_hi = (-s_hi * y_hi - ds_hi_a * dy_hi_a + sigma * mu) if n_hi else np.zeros(0)
        step = solve_newton(rc_lo, rc_hi)
        if step is None:
            return None
        dx, ds_lo, ds_hi, dy_lo, dy_hi, dy_eq = step
        alpha_p = 0.995 * min(max_step(s_lo, ds_lo), max_step(s_hi, ds_hi))
        alpha_d = 0.995 * min(max_step(y_lo, dy_lo), max_step(y_hi, dy_hi))
        x += alpha_p * dx
        if n_lo:
            s_lo += alpha_p * ds_lo
            y_lo += alpha_d * dy_lo
        if n_hi:
            s_hi += alpha_p * ds_hi
            y_hi += alpha_d * dy_hi
        if n_eq:
            y_eq += alpha_d * dy_eq
    return None


_WS_CACHE: dict = {}
_WS_CACHE_CAP = 24


def workspace_for(prob: MiqpProblem, options: SolverOptions) -> QpWorkspace:
    """Fetch (or build) the factorized workspace for a problem structure."""
    p_diag = prob.quad_diag if prob.quad_diag is not None else np.zeros(prob.n)
    key = _content_key(p_diag, prob.a_mat, options.sigma, options.rho,
                       options.rho_eq_scale)
    ws = _WS_CACHE.get(key)
    if ws is None:
        ws = QpWorkspace(
            p_diag, prob.a_mat, prob.n,
            eq_mask_rows=prob.row_lb == prob.row_ub, options=options,
        )
        if len(_WS_CACHE) >= _WS_CACHE_CAP:
            _WS_CACHE.pop(next(iter(_WS_CACHE)))
        _WS_CACHE[key] = ws
    return ws


def _stacked_bounds(prob, var_lb=None, var_ub=None):
    lb = np.concatenate([prob.row_lb, prob.var_lb if var_lb is None else var_lb])
    ub = np.concatenate([prob.row_ub, prob.var_ub if var_ub is None else var_ub])
    return lb, ub


def solve_convex(
    prob: MiqpProblem,
    options: SolverOptions | None = None,
    warm=None,
    workspace: QpWorkspace | None = None,
    var_lb=None,
    var_ub=None,
) -> Solution:
    """Solve the continuous (binaries fixed or relaxed-as-box) problem.

    Statuses are returned, never raised: infeasible and unbounded problems
    yield the matching status with a NaN objective.  Pure LPs go through
    the library simplex/IPM backend when enabled; quadratic objectives use
    the operator-splitting path with direct-KKT polish.
    """
    opts = options or SolverOptions()
    is_lp = prob.quad_diag is None or not prob.quad_diag.any()
    if is_lp and opts.lp_backend == "highs":
        sol = _solve_lp_scipy(prob, var_lb, var_ub)
        if sol is not None:
            return sol
    if not is_lp and prob.n <= opts.ipm_max_n:
        sol = _solve_qp_ipm(prob, var_lb, var_ub, warm=warm)
        if sol is not None:
            return sol
    ws = workspace if workspace is not None else workspace_for(prob, opts)
    lb, ub = _stacked_bounds(prob, var_lb, var_ub)

    hook = None
    if opts.polish:
        def hook(partial):
            return _polish(prob, partial, opts, require_certificate=True)

    raw = ws.solve(prob.c, lb, ub, warm=warm, polish_hook=hook)

    status = raw["status"]
    x = raw["x"]
    r = (raw["r_prim"], raw["r_dual"])
    if not raw.get("polished") and status in (OPTIMAL, ITER_LIMIT) and opts.polish:
        polished = _polish(prob, raw, opts,
                           require_certificate=status != OPTIMAL)
        if polished is not None:
            x, raw["y"], rp, rd = polished
            r = (rp, rd)
            raw["x"] = x
            status = OPTIMAL
    if status in (INFEASIBLE, UNBOUNDED):
        return Solution(x=x, objective_value=float("nan"), status=status,
                        kkt_residuals=r, iterations=raw["iterations"])
    obj = prob.objective_at(x)
    sol = Solution(x=x, objective_value=obj, status=status, kkt_residuals=r,
                   iterations=raw["iterations"])
    sol._raw_y = raw["y"]  # kept for warm starts
    return sol


def _fixed_bounds(prob, assignment: dict):
    lb = prob.var_lb.copy()
    ub = prob.var_ub.copy()
    for j, val in assignment.items():
        lb[j] = ub[j] = float(val)
    return lb, ub


def _relaxed_box(prob):
    lb = prob.var_lb.copy()
    ub = prob.var_ub.copy()
    b = prob.binaries
    lb[b] = np.maximum(lb[b], 0.0)
    ub[b] = np.minimum(ub[b], 1.0)
    return lb, ub


def _assignment_int(prob, assignment: dict) -> int:
    out = 0
    for pos, j in enumerate(prob.binaries):
        if assignment.get(int(j), 0):
            out |= 1 << pos
    return out


def _solve_assignment(prob, ws, opts, assignment: dict, warm=None) -> Solution:
    lb, ub = _fixed_bounds(prob, assignment)
    sol = solve_convex(prob, opts, workspace=ws, var_lb=lb, var_ub=ub,
                       warm=warm)
    if sol.status == OPTIMAL:
        vals = np.array([assignment[int(j)] for j in prob.binaries], dtype=float)
        sol.binary_values = vals
        sol.x[prob.binaries] = vals
    return sol


def solve_miqp(
    prob: MiqpProblem,
    backend: str = "branch_and_bound",
    options: SolverOptions | None = None,
    incumbent: dict | None = None,
    warm=None,
) -> Solution:
    """Globally optimal solve over the binary index set.

    backend "enumerate" tries all assignments (capped at 30 binaries);
    "branch_and_bound" explores best-first with relaxation bounds, branching
    on the most fractional binary, ties broken toward the lowest
    assignment-as-binary-integer.  An optional incumbent assignment (dict
    binary-index -> 0/1) primes the search and warm seeds the root
    relaxation.
    """
    opts = options or SolverOptions()
    nb = prob.binaries.size
    if nb == 0:
        return solve_convex(prob, opts, warm=warm)
    if backend == "enumerate":
        if nb > 30:
            raise TooManyBinaries(f"{nb} binaries exceed the enumeration cap")
        return _solve_enumerate(prob, opts)
    if backend != "branch_and_bound":
        raise MiqpError(f"unknown backend {backend!r}")
    return _solve_bnb(prob, opts, incumbent, warm)


def _ws_if_qp(prob, opts):
    is_lp = prob.quad_diag is None or not prob.quad_diag.any()
    if is_lp and opts.lp_backend == "highs":
        return None  # solve_convex routes through the LP backend
    return workspace_for(prob, opts)


def _solve_enumerate(prob, opts) -> Solution:
    ws = _ws_if_qp(prob, opts)
    bins = [int(j) for j in prob.binaries]
    best = None
    best_int = -1
    warm = None
    for code in range(1 << len(bins)):
        assignment = {j: (code >> pos) & 1 for pos, j in enumerate(bins)}
        sol = _solve_assignment(prob, ws, opts, assignment, warm=warm)
        if sol.status != OPTIMAL:
            continue
        warm = (sol.x, getattr(sol, "_raw_y", None))
        if best is None or sol.objective_value < best.objective_value - 1e-9:
            best, best_int = sol, code
    if best is None:
        return Solution(x=np.zeros(prob.n), objective_value=float("nan"),
                        status=INFEASIBLE, kkt_residuals=(np.inf, np.inf))
    return best


def _solve_bnb(prob, opts, incumbent=None, warm=None) -> Solution:
    ws = _ws_if_qp(prob, opts)
    bins = [int(j) for j in prob.binaries]
    relax_lb, relax_ub = _relaxed_box(prob)

    def relax_solve(assignment, warm):
        lb, ub = relax_lb.copy(), relax_ub.copy()
        for j, v in assignment.items():
            lb[j] = ub[j] = float(v)
        return solve_convex(prob, opts, warm=warm, workspace=ws,
                            var_lb=lb, var_ub=ub)

    best: Solution | None = None
    best_int = -1

    def offer(assignment, warm_o=None):
        nonlocal best, best_int
        code = _assignment_int(prob, assignment)
        sol = _solve_assignment(prob, ws, opts, assignment, warm=warm_o)
        if sol.status != OPTIMAL:
            return
        if (best is None or sol.objective_value < best.objective_value - 1e-9
                or (abs(sol.objective_value - best.objective_value) <= 1e-9
                    and code < best_int)):
            best, best_int = sol, code

    if incumbent is not None and all(j in incumbent for j in bins):
        offer({j: int(incumbent[j]) for j in bins}, warm_o=warm)

    root = relax_solve({}, warm)
    if root.status == INFEASIBLE:
        return Solution(x=np.zeros(prob.n), objective_value=float("nan"),
                        status=INFEASIBLE, kkt_residuals=root.kkt_residuals)
    if root.status == UNBOUNDED:
        return Solution(x=root.x, objective_value=float("-inf"),
                        status=UNBOUNDED, kkt_residuals=root.kkt_residuals)

    # rounding incumbent
    warm_root = (root.x, getattr(root, "_raw_y", None))
    offer({j: int(round(np.clip(root.x[j], 0, 1))) for j in bins},
          warm_o=warm_root)

    root_bound = root.objective_value if root.status == OPTIMAL else -np.inf
    seq = 0
    heap = []
    warm0 = (root.x, getattr(root, "_raw_y", None))
    heapq.heappush(heap, (root_bound, 0, seq, {}, warm0))
    nodes = 0
    hit_cap = False
    while heap:
        bound, code, _, assignment, warm = heapq.heappop(heap)
        if best is not None and bound >= best.objective_value - 1e-9:
            break
        nodes += 1
        if nodes > opts.max_nodes:
            hit_cap = True
            break
        rel = relax_solve(assignment, warm)
        if rel.status in (INFEASIBLE, UNBOUNDED):
            continue
        # only a converged relaxation provides a trustworthy bound
        child_bound = rel.objective_value if rel.status == OPTIMAL else bound
        if (rel.status == OPTIMAL and best is not None
                and rel.objective_value >= best.objective_value - 1e-9):
            continue
        free = [j for j in bins if j not in assignment]
        vals = rel.x[free] if free else np.array([])
        if free and np.abs(vals - np.round(vals)).max() > 1e-6:
            j_branch = free[int(np.argmin(np.abs(vals - 0.5)))]
        else:
            full = dict(assignment)
            for j in free:
                full[j] = int(round(np.clip(rel.x[j], 0, 1)))
            offer(full, warm_o=(rel.x, getattr(rel, "_raw_y", None)))
            if rel.status == OPTIMAL:
                continue
            if not free:
                continue
            j_branch = free[0]
        warm_child = (rel.x, getattr(rel, "_raw_y", None))
        for v in (0, 1):
            child = dict(assignment)
            child[j_branch] = v
            seq += 1
            heapq.heappush(
                heap,
                (child_bound, _assignment_int(prob, child), seq,
                 child, warm_child),
            )

    if best is None:
        status = ITER_LIMIT if hit_cap else INFEASIBLE
        return Solution(x=np.zeros(prob.n), objective_value=float("nan"),
                        status=status, kkt_residuals=(np.inf, np.inf))
    if hit_cap:
        best.status = ITER_LIMIT
    return best


def write_lp(prob: MiqpProblem, path: str, name: str = "problem"):
    """Dump the problem in LP text format for external cross-checking."""
    names = prob.names or [f"x{i}" for i in range(prob.n)]

    def term(coef, var, lead=False):
        sign = "-" if coef < 0 else ("" if lead else "+")
        return f"{sign} {abs(coef):.12g} {var}"

    lines = [f"\\ {name}", "Minimize", " obj:"]
    parts = []
    for i, ci in enumerate(prob.c):
        if ci != 0:
            parts.append(term(ci, names[i], lead=not parts))
    if prob.quad_diag is not None and (prob.quad_diag != 0).any():
        qparts = [
            f"{'+' if qi > 0 else '-'} {abs(qi):.12g} {names[i]}^2"
            for i, qi in enumerate(prob.quad_diag) if qi != 0
        ]
        parts.append("+ [ " + " ".join(qparts) + " ] / 2")
    lines.append("  " + (" ".join(parts) if parts else "0 " + names[0]))
    lines.append("Subject To")
    a_csr = prob.a_mat.tocsr()
    for r in range(prob.m):
        row = a_csr.getrow(r)
        expr = " ".join(
            term(v, names[j], lead=(k == 0))
            for k, (j, v) in enumerate(zip(row.indices, row.data))
        ) or f"0 {names[0]}"
        lo, hi = prob.row_lb[r], prob.row_ub[r]
        if lo == hi:
            lines.append(f" r{r}: {expr} = {lo:.12g}")
        else:
            if np.isfinite(hi):
                lines.append(f" r{r}u: {expr} <= {hi:.12g}")
            if np.isfinite(lo):
                lines.append(f" r{r}l: {expr} >= {lo:.12g}")
    lines.append("Bounds")
    for i in range(prob.n):
        lo, hi = prob.var_lb[i], prob.var_ub[i]
        lo_s = f"{lo:.12g}" if np.isfinite(lo) else "-inf"
        hi_s = f"{hi:.12g}" if np.isfinite(hi) else "+inf"
        lines.append(f" {lo_s} <= {names[i]} <= {hi_s}")
    if prob.binaries.size:
        lines.append("Binaries")
        lines.append(" " + " ".join(names[int(j)] for j in prob.binaries))
    lines.append("End")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
