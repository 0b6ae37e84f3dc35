"""Passive voltage-support tariff: exact piecewise zone oracle and its
mixed-integer linear reformulation.

The tariff divides the substation (P, Q) exchange plane into a cost-free
zone 1 and a penalized zone 2.  While importing above p_min the cost-free
reactive band is the cone |Q| <= P * tan_phi; below p_min it is the
rectangle |Q| <= q_min; while exporting no penalty applies.  Zone 2 costs
c_p per unit of reactive excess beyond the boundary.

The constraint block expresses this exactly with three binaries per
interval (export flag, zone flag, below-threshold flag) plus continuous
auxiliaries.  The penalty variable is kept normalized by c_p (i.e. in
reactive-power units) so that a single per-unit Big-M dominates every row;
the objective weights it by c_p.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class VoltageSupportError(ValueError):
    pass


class InvalidBigM(VoltageSupportError):
    pass


class NonpositiveZeta(VoltageSupportError):
    pass


class NoFeasibleAssignment(VoltageSupportError):
    pass


@dataclass(frozen=True)
class AsParameters:
    """Tariff parameters, all power quantities in per-unit.

    q_min is treated as data (a fixed fraction of p_min); the transformer
    short-circuit bound is enforced as a validation check.  The implied
    threshold q_min * cot(phi) may deviate from p_min by up to 1% before
    the consistency flag trips.
    """

    p_min: float
    q_min: float
    tan_phi: float
    c_p: float
    m_p: float
    zeta: float = 1e-8
    v_tr_pct: float = 10.0
    s_tr: float = 5.0

    def __post_init__(self):
        if not self.p_min > 0:
            raise VoltageSupportError("p_min must be positive")
        if not self.tan_phi > 0:
            raise VoltageSupportError("tan_phi must be positive")
        if self.c_p < 0:
            raise VoltageSupportError("c_p must be nonnegative")
        if abs(self.q_min) > (self.v_tr_pct / 100.0) * self.s_tr + 1e-12:
            raise VoltageSupportError(
                "q_min exceeds the transformer short-circuit bound "
                f"({(self.v_tr_pct / 100.0) * self.s_tr:.4g})"
            )

    @property
    def consistency_warning(self) -> str | None:
        """Non-None when p_min and q_min*cot(phi) disagree by more than 1%."""
        implied = self.q_min / self.tan_phi
        dev = abs(implied - self.p_min) / self.p_min
        if dev > 0.01:
            return (
                f"p_min={self.p_min:.6g} vs q_min*cot(phi)={implied:.6g} "
                f"({100 * dev:.2f}% apart)"
            )
        return None


@dataclass(frozen=True)
class ExchangePoint:
    p_ex: float
    q_ex: float

    def __post_init__(self):
        if not (np.isfinite(self.p_ex) and np.isfinite(self.q_ex)):
            raise VoltageSupportError("exchange point must be finite")


def zone_boundary(p_ex, params: AsParameters):
    """Cost-free reactive limit |Q| may reach at active exchange p_ex.

    The rectangle branch applies up to and including p_min; the constraint
    block admits the below-threshold flag at exactly p_min, and with the
    conventional q_min >= p_min * tan_phi that branch is the wider one.
    """
    p_ex = np.asarray(p_ex, dtype=float)
    return np.where(p_ex <= params.p_min, params.q_min, p_ex * params.tan_phi)


def zone_oracle(pt: ExchangePoint, params: AsParameters):
    """Classify an exchange point and price it per the piecewise tariff.

    Returns (zone, cost).  Points exactly on the boundary are zone 1, and
    exporting points (p_ex <= 0, where the export flag can engage) are
    never penalized.
    """
    q_lim = float(zone_boundary(pt.p_ex, params))
    in_zone2 = pt.p_ex > 0 and abs(pt.q_ex) > q_lim
    cost = params.c_p * (abs(pt.q_ex) - q_lim) if in_zone2 else 0.0
    return (2 if in_zone2 else 1), cost


# Local column order of the constraint block; the last two columns refer to
# the substation exchange variables owned by the caller.
AS_LOCAL_VARS = ("ctn", "qlim", "pmu", "dp", "dphi", "dlt")
AS_BINARY_LOCALS = (3, 4, 5)
N_AS_LOCAL = 6
_COLS = 8  # locals + (p_ex, q_ex)
_IPEX, _IQEX = 6, 7


@dataclass(frozen=True)
class AsConstraintBlock:
    """Sparse-able row block tying (p_ex, q_ex) to the tariff cost.

    rows[r] holds coefficients over (ctn, qlim, pmu, dp, dphi, dlt, p_ex,
    q_ex) with bounds row_lb[r] <= rows[r] @ vars <= row_ub[r].  ctn is the
    penalty divided by c_p; weight it by c_p in the objective.
    """

    k: int
    rows: np.ndarray
    row_lb: np.ndarray
    row_ub: np.ndarray

    @property
    def n_binaries(self) -> int:
        return len(AS_BINARY_LOCALS)


def build_as_block(k: int, params: AsParameters) -> AsConstraintBlock:
    """Emit the tariff constraint rows for interval k.

    The block makes zone 1 free, prices zone-2 operation at c_p per unit of
    reactive excess, leaves exports unconstrained, and pins the boundary
    variable qlim to q_min (below threshold) or pmu*tan_phi (above), where
    pmu tracks p_ex above the threshold and collapses below zeta/tan_phi
    otherwise.
    """
    if not params.zeta > 0:
        raise NonpositiveZeta(f"zeta must be positive, got {params.zeta}")
    m = params.m_p
    if m <= 2.0 * max(params.p_min, params.q_min, 1.0):
        raise InvalidBigM(
            f"m_p={m} does not dominate the exchange scale "
            f"(p_min={params.p_min}, q_min={params.q_min})"
        )
    z, t = params.zeta, params.tan_phi
    pm, qm = params.p_min, params.q_min
    inf = np.inf

    rows = np.zeros((17, _COLS))
    lb = np.full(17, -inf)
    ub = np.full(17, inf)

    def put(r, lo, hi, **coef):
        for name, val in coef.items():
            if name == "pex":
                rows[r, _IPEX] = val
            elif name == "qex":
                rows[r, _IQEX] = val
            else:
                rows[r, AS_LOCAL_VARS.index(name)] = val
        lb[r] = lo
        ub[r] = hi

    put(0, 0.0, inf, ctn=1.0)                                  # penalty sign
    put(1, -inf, m, ctn=1.0, dp=m)                             # zero when exporting
    put(2, -inf, m, ctn=1.0, dphi=m)                           # zero in zone 1
    put(3, -inf, 0.0, qex=1.0, ctn=-1.0, qlim=-1.0, dp=-m, dphi=-m)
    put(4, 0.0, inf, qex=1.0, ctn=1.0, qlim=1.0, dp=m, dphi=m)
    put(5, -inf, m, qex=1.0, qlim=-1.0, dphi=m)                # zone-1 band, upper
    put(6, -m, inf, qex=1.0, qlim=1.0, dphi=-m)                # zone-1 band, lower
    put(7, -inf, m, qex=1.0, qlim=-1.0, dphi=m, dp=-m)
    put(8, -m, inf, qex=1.0, qlim=1.0, dphi=-m, dp=m)
    put(9, -inf, m + z, pmu=t, dlt=m)                          # pmu collapse, upper
    put(10, -m - z, inf, pmu=t, dlt=-m)                        # pmu collapse, lower
    put(11, -inf, z, pex=1.0, pmu=-1.0, dlt=z - pm)            # pmu tracks pex
    put(12, 0.0, inf, pex=1.0, pmu=-1.0, dlt=m)
    put(13, pm, inf, pmu=1.0, dlt=pm)
    put(14, 0.0, 0.0, qlim=1.0, dlt=-qm, pmu=-t)               # boundary definition
    put(15, 0.0, inf, pex=1.0, dp=m)                           # export flag, lower
    put(16, -inf, m, pex=1.0, dp=m)                            # export flag, upper

    return AsConstraintBlock(k=k, rows=rows, row_lb=lb, row_ub=ub)


def _min_ctn_vectorized(block: AsConstraintBlock, assignment, p_ex, q_ex):
    """Exact minimal normalized penalty of the block's LP restriction.

    Binaries and the exchange point are fixed; the equality row eliminates
    qlim, leaving a 2-variable LP over (ctn, pmu) solved by vertex
    enumeration in the pmu coordinate.  Vectorized over exchange points;
    returns NaN where the restriction is infeasible.
    """
    rows, lb, ub = block.rows, block.row_lb, block.row_ub
    npts = p_ex.shape[0]
    bvec = np.array(assignment, dtype=float)

    shift = rows[:, 3:6] @ bvec
    rhs_pt = (
        rows[:, _IPEX][:, None] * p_ex[None, :]
        + rows[:, _IQEX][:, None] * q_ex[None, :]
        + shift[:, None]
    )
    lo = lb[:, None] - rhs_pt
    hi = ub[:, None] - rhs_pt
    g = rows[:, :3]  # remaining columns: ctn, qlim, pmu

    eq = np.flatnonzero(block.row_lb == block.row_ub)
    if eq.size != 1 or g[eq[0], 1] == 0 or g[eq[0], 0] != 0:
        raise VoltageSupportError("block must define qlim through one equality")
    e = eq[0]
    # qlim = (rhs_e - g_pmu * pmu) / g_qlim, affine in pmu
    q_alpha = lo[e] / g[e, 1]           # (npts,)
    q_beta = -g[e, 2] / g[e, 1]         # scalar

    # substitute qlim out of the inequality rows
    ineq = np.array([r for r in range(rows.shape[0]) if r != e])
    gc = g[ineq, 0]
    gq = g[ineq, 1]
    gm = g[ineq, 2] + gq * q_beta                    # per-row pmu coefficient
    off = gq[:, None] * q_alpha[None, :]             # moves to rhs
    lo_i = lo[ineq] - off
    hi_i = hi[ineq] - off

    big = 1e30
    tol = 1e-9

    pmu_lo = np.full(npts, -big)
    pmu_hi = np.full(npts, big)
    lower_a, lower_b = [], []   # ctn >= a + b*pmu
    upper_a, upper_b = [], []   # ctn <= a + b*pmu
    for r in range(ineq.size):
        c = gc[r]
        if c == 0.0:
            mrow = gm[r]
            if mrow == 0.0:
                bad_lo = lo_i[r] > tol
                bad_hi = hi_i[r] < -tol
                pmu_lo = np.where(bad_lo | bad_hi, big, pmu_lo)
                continue
            a = lo_i[r] / mrow
            b = hi_i[r] / mrow
            lo_r, hi_r = (a, b) if mrow > 0 else (b, a)
            pmu_lo = np.maximum(pmu_lo, lo_r)
            pmu_hi = np.minimum(pmu_hi, hi_r)
        else:
            # c*ctn + m*pmu in [lo, hi]
            if c > 0:
                upper_a.append(hi_i[r] / c)
                upper_b.append(-gm[r] / c)
                lower_a.append(lo_i[r] / c)
                lower_b.append(-gm[r] / c)
            else:
                upper_a.append(lo_i[r] / c)
                upper_b.append(-gm[r] / c)
                lower_a.append(hi_i[r] / c)
                lower_b.append(-gm[r] / c)

    la = np.array([np.broadcast_to(a, (npts,)) for a in lower_a])  # (nl, npts)
    lbv = np.array(lower_b)
    ua = np.array([np.broadcast_to(a, (npts,)) for a in upper_a])
    ubv = np.array(upper_b)
    finite_la = np.where(np.isfinite(la), la, -big)
    finite_ua = np.where(np.isfinite(ua), ua, big)

    # candidate pmu values: interval ends, lower-lower and lower-upper crossings
    cands = [pmu_lo, pmu_hi]
    nl = lbv.size
    nu = ubv.size
    for i in range(nl):
        for j in range(i + 1, nl):
            if lbv[i] != lbv[j]:
                cands.append((finite_la[j] - finite_la[i]) / (lbv[i] - lbv[j]))
        for j in range(nu):
            if lbv[i] != ubv[j]:
                cands.append((finite_ua[j] - finite_la[i]) / (lbv[i] - ubv[j]))
    cand = np.stack(cands, axis=0)  # (ncand, npts)
    cand = np.clip(cand, pmu_lo[None, :], pmu_hi[None, :])

    f_lower = (finite_la[None, :, :] + np.multiply.outer(cand, lbv).transpose(0, 2, 1)).max(axis=1)
    f_upper = (finite_ua[None, :, :] + np.multiply.outer(cand, ubv).transpose(0, 2, 1)).min(axis=1)
    span = np.maximum(1.0, np.abs(f_upper))
    ok = (f_lower <= f_upper + tol * span) & (cand >= pmu_lo[None, :] - tol) & (
        cand <= pmu_hi[None, :] + tol
    )
    f_val = np.where(ok, f_lower, np.inf)
    best = f_val.min(axis=0)
    best = np.where(pmu_lo > pmu_hi + tol, np.inf, best)
    return np.where(np.isfinite(best), best, np.nan)


def min_penalty_lp(block: AsConstraintBlock, assignment, p_ex: float, q_ex: float):
    """Minimal normalized penalty for one point/assignment (None if infeasible)."""
    out = _min_ctn_vectorized(
        block, assignment, np.array([float(p_ex)]), np.array([float(q_ex)])
    )
    return None if np.isnan(out[0]) else float(out[0])


def verify_reformulation(params: AsParameters, grid) -> float:
    """Max |MILP cost - oracle cost| over a finite grid of exchange points.

    For each point the binaries are enumerated, each LP restriction is
    solved for its minimal penalty, and the best feasible assignment is
    compared against zone_oracle.  Raises NoFeasibleAssignment when some
    point admits no feasible assignment (a transcription bug).
    """
    pts = [(float(p.p_ex), float(p.q_ex)) if isinstance(p, ExchangePoint)
           else (float(p[0]), float(p[1])) for p in grid]
    if not pts:
        return 0.0
    p_ex = np.array([p for p, _ in pts])
    q_ex = np.array([q for _, q in pts])

    block = build_as_block(0, params)
    best = np.full(p_ex.shape[0], np.nan)
    for code in range(8):
        assignment = ((code >> 0) & 1, (code >> 1) & 1, (code >> 2) & 1)
        ctn = _min_ctn_vectorized(block, assignment, p_ex, q_ex)
        best = np.where(
            np.isnan(best), ctn,
            np.where(np.isnan(ctn), best, np.minimum(best, ctn)),
        )
    if np.isnan(best).any():
        idx = int(np.flatnonzero(np.isnan(best))[0])
        raise NoFeasibleAssignment(
            f"no feasible binary assignment at (p_ex={p_ex[idx]}, q_ex={q_ex[idx]})"
        )

    oracle = np.array(
        [zone_oracle(ExchangePoint(p, q), params)[1] for p, q in pts]
    )
    milp_cost = params.c_p * np.maximum(best, 0.0)
    return float(np.abs(milp_cost - oracle).max())
