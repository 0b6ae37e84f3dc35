"""Microgrid component models: storage dynamics, inverter capability as an
inscribed polygon, curtailment, and the local power balances.

Each microgrid couples to the network only through its bus injection pair
(p_inj, q_inj); everything else (battery power, stored energy, curtailment,
inverter reactive output) is local.  The inverter carries the DC-side net
flow p_inj + p_load_ac - p_curt together with its reactive output, bounded
by an l-gon inscribed in the apparent-power circle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MicrogridError(ValueError):
    pass


class PowerOutOfRange(MicrogridError):
    pass


class HorizonMismatch(MicrogridError):
    pass


@dataclass(frozen=True)
class BessSpec:
    """Battery storage parameters; eta folds efficiency and interval length
    (hours), so one step moves energy by eta * power."""

    capacity: float
    e_min: float
    e_max: float
    p_min: float
    p_max: float
    eta: float
    beta_b: float = 0.0

    def __post_init__(self):
        if not (0 < self.e_min < self.e_max <= self.capacity):
            raise MicrogridError("need 0 < e_min < e_max <= capacity")
        if not (self.p_min < 0 < self.p_max):
            raise MicrogridError("charge/discharge bounds must straddle zero")
        if not self.eta > 0:
            raise MicrogridError("eta must be positive")

    @classmethod
    def from_capacity(cls, capacity, p_max, eta, beta_b=0.0,
                      frac_min=0.2, frac_max=0.9) -> "BessSpec":
        return cls(capacity=capacity, e_min=frac_min * capacity,
                   e_max=frac_max * capacity, p_min=-p_max, p_max=p_max,
                   eta=eta, beta_b=beta_b)


@dataclass(frozen=True)
class InverterSpec:
    s_inv: float
    segments: int = 16

    def __post_init__(self):
        if not self.s_inv > 0:
            raise MicrogridError("inverter rating must be positive")
        if self.segments < 4 or self.segments % 2:
            raise MicrogridError("segment count must be even and >= 4")


@dataclass(frozen=True)
class MicrogridSpec:
    """One microgrid: bus attachment, storage, inverter, and forecasts.

    Forecast arrays are per-interval in per-unit.  load_ac_p is the AC-side
    share of the local active load; omega is the load power-factor angle.
    e_init is the stored energy entering the first interval.
    """

    bus: int
    bess: BessSpec
    inverter: InverterSpec
    pv_forecast: np.ndarray
    load_forecast_p: np.ndarray
    load_forecast_q: np.ndarray
    load_ac_p: np.ndarray
    omega: float
    e_init: float

    def __post_init__(self):
        arrays = {}
        for name in ("pv_forecast", "load_forecast_p", "load_forecast_q",
                     "load_ac_p"):
            arrays[name] = np.atleast_1d(np.asarray(getattr(self, name), float))
        lengths = {a.shape for a in arrays.values()}
        if len(lengths) != 1:
            raise MicrogridError("forecast arrays must share a length")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        if not (self.bess.e_min <= self.e_init <= self.bess.e_max):
            raise MicrogridError("initial energy outside the storage band")
        if not (0 < np.cos(self.omega) <= 1):
            raise MicrogridError("load power factor angle out of range")

    @property
    def tan_omega(self) -> float:
        return float(np.tan(self.omega))


def pwl_circle(spec: InverterSpec) -> np.ndarray:
    """Half-plane rows (a_j, b_j, c_j) with a_j*p + b_j*q + c_j <= 0.

    The feasible polygon has its l vertices exactly on the circle of radius
    s_inv and edge midpoints at radius s_inv*cos(pi/l), i.e. it is inscribed:
    every feasible (p, q) satisfies p^2 + q^2 <= s_inv^2.
    """
    l = spec.segments
    j = np.arange(1, l + 1)
    a = 2.0 * np.sin(np.pi / l) * np.sin(np.pi * (2 * j - 1) / l)
    b = 2.0 * np.sin(np.pi / l) * np.cos(np.pi * (2 * j - 1) / l)
    c = np.full(l, -spec.s_inv * np.sin(2.0 * np.pi / l))
    return np.column_stack([a, b, c])


def bess_step(e_k: float, p_bat_k: float, spec: BessSpec) -> float:
    """Energy after one interval of battery power p_bat_k (discharge > 0).

    Callers enforce the e_min/e_max band as a constraint; this is the raw
    dynamic update and intentionally does not clamp.
    """
    if not (spec.p_min - 1e-12 <= p_bat_k <= spec.p_max + 1e-12):
        raise PowerOutOfRange(
            f"battery power {p_bat_k} outside [{spec.p_min}, {spec.p_max}]"
        )
    return e_k - spec.eta * p_bat_k


# Column order of one microgrid's per-interval variables in the emitted rows.
MG_LOCAL_VARS = ("p_bat", "p_curt", "e", "q_inv", "p_inj", "q_inj")
N_MG_LOCAL = 6


@dataclass(frozen=True)
class MgConstraintSet:
    """Linear rows over the horizon-stacked microgrid variables.

    Variable x[k * 6 + j] is MG_LOCAL_VARS[j] at interval k; rows satisfy
    row_lb <= rows @ x <= row_ub, and var_lb/var_ub carry the per-interval
    boxes (battery power, energy band, curtailment cap).
    """

    horizon: int
    rows: np.ndarray
    row_lb: np.ndarray
    row_ub: np.ndarray
    var_lb: np.ndarray
    var_ub: np.ndarray

    def col(self, k: int, name: str) -> int:
        return k * N_MG_LOCAL + MG_LOCAL_VARS.index(name)


def build_mg_constraints(spec: MicrogridSpec, horizon: int) -> MgConstraintSet:
    """Emit storage dynamics, inverter polygon, balance, and curtailment
    rows for one microgrid over the horizon."""
    if horizon < 1 or spec.pv_forecast.shape[0] < horizon:
        raise HorizonMismatch(
            f"forecasts cover {spec.pv_forecast.shape[0]} intervals, "
            f"need {horizon}"
        )
    l = spec.inverter.segments
    n = horizon * N_MG_LOCAL
    pwl = pwl_circle(spec.inverter)
    tan_om = spec.tan_omega

    n_rows = horizon * (3 + l)
    rows = np.zeros((n_rows, n))
    lo = np.full(n_rows, -np.inf)
    hi = np.full(n_rows, np.inf)
    var_lb = np.full(n, -np.inf)
    var_ub = np.full(n, np.inf)

    cset = MgConstraintSet(horizon, rows, lo, hi, var_lb, var_ub)
    r = 0
    for k in range(horizon):
        c_bat = cset.col(k, "p_bat")
        c_curt = cset.col(k, "p_curt")
        c_e = cset.col(k, "e")
        c_qinv = cset.col(k, "q_inv")
        c_pinj = cset.col(k, "p_inj")
        c_qinj = cset.col(k, "q_inj")

        var_lb[c_bat], var_ub[c_bat] = spec.bess.p_min, spec.bess.p_max
        var_lb[c_e], var_ub[c_e] = spec.bess.e_min, spec.bess.e_max
        var_lb[c_curt] = 0.0
        var_ub[c_curt] = float(spec.load_forecast_p[k])

        # storage dynamics: e_k - e_{k-1} + eta * p_bat_k = 0 (e_{-1} = e_init)
        rows[r, c_e] = 1.0
        rows[r, c_bat] = spec.bess.eta
        if k == 0:
            lo[r] = hi[r] = spec.e_init
        else:
            rows[r, cset.col(k - 1, "e")] = -1.0
            lo[r] = hi[r] = 0.0
        r += 1

        # active balance: p_inj - p_bat - p_curt = pv - load
        rows[r, c_pinj] = 1.0
        rows[r, c_bat] = -1.0
        rows[r, c_curt] = -1.0
        lo[r] = hi[r] = float(spec.pv_forecast[k] - spec.load_forecast_p[k])
        r += 1

        # reactive balance: q_inj - q_inv - tan(omega) * p_curt = -q_load
        rows[r, c_qinj] = 1.0
        rows[r, c_qinv] = -1.0
        rows[r, c_curt] = -tan_om
        lo[r] = hi[r] = float(-spec.load_forecast_q[k])
        r += 1

        # inverter polygon on (p_inv, q_inv), p_inv = p_inj + load_ac - p_curt
        for seg in range(l):
            a, b, c = pwl[seg]
            rows[r, c_pinj] = a
            rows[r, c_curt] = -a
            rows[r, c_qinv] = b
            hi[r] = -c - a * float(spec.load_ac_p[k])
            r += 1

    return cset
