"""Scenario ingestion: a sectioned key-value config plus a columnar
timeline file drive the receding-horizon simulation.

All optimization inputs are converted here, once, to per-unit power and to
cost rates in currency per per-unit interval (tariffs and penalties arrive
in currency per kWh and are scaled by the power base and interval length).
Native feeder loads at microgrid buses are folded into that microgrid's
load forecast so each bus has exactly one demand model.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .microgrid import BessSpec, InverterSpec, MicrogridSpec
from .miqp import SolverOptions
from .network import RadialNetwork, _split_sections, _kv_pairs
from .powerflow import OperatingLimits
from .voltage_support import AsParameters


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioTimeline:
    """Per-interval data padded by the horizon beyond the simulated day."""

    intervals: int
    dt_min: float
    tariff: np.ndarray            # currency per pu per interval, padded
    tariff_raw: np.ndarray        # currency per kWh, padded
    p_load: np.ndarray            # (n_bus, padded), zeros at microgrid buses
    q_load: np.ndarray
    mg_buses: list
    mg_index: dict
    mg_pv: list
    mg_load_p: list
    mg_load_q: list
    mg_load_ac: list
    beta_loss: float
    beta_curt: np.ndarray         # per bus
    as_params: AsParameters | None
    peak_exchange_estimate: float

    @property
    def dt_hours(self) -> float:
        return self.dt_min / 60.0

    @property
    def padded(self) -> int:
        return int(self.tariff.shape[0])


@dataclass
class AdmmSettings:
    rho: float = 160.0
    epsilon: float = 1e-4
    max_iters: int = 1000
    graph: str = "complete"
    rho_stage2: float | None = None
    eps_switch: float | None = None


@dataclass
class Scenario:
    timeline: ScenarioTimeline
    mg_specs: list
    as_params: AsParameters | None
    limits: OperatingLimits
    slack_v: float
    intervals: int
    horizon: int
    dt_min: float
    solver: SolverOptions
    admm: AdmmSettings
    s_kw: float

    def cost_to_currency(self, value: float) -> float:
        return value  # costs are kept in currency already


def _get(d, key, default=None, cast=float):
    if key in d:
        return cast(d[key])
    if default is None:
        raise ScenarioError(f"missing required key {key!r}")
    return default


def _read_timeline_file(path: str):
    cols = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            cols.append([float(tok) for tok in line.split()])
    if not cols:
        raise ScenarioError(f"timeline file {path} is empty")
    arr = np.array(cols)
    if arr.shape[1] < 5:
        raise ScenarioError(
            "timeline needs columns: t tariff load_p load_q pv"
        )
    return arr


def load_scenario(path, net: RadialNetwork) -> Scenario:
    """Parse a scenario config (and its timeline file) against a network."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    sections = _split_sections(text)
    base_dir = os.path.dirname(os.path.abspath(path))

    mpc = _kv_pairs(sections.get("mpc", []))
    intervals = int(_get(mpc, "intervals", 96))
    dt_min = _get(mpc, "dt_min", 15.0)
    horizon = int(_get(mpc, "horizon", 4))
    v_min = _get(mpc, "v_min", 0.95)
    v_max = _get(mpc, "v_max", 1.05)
    slack_v = _get(mpc, "slack_v", 1.0)
    tl_name = mpc.get("timeline")
    if tl_name is None:
        raise ScenarioError("[mpc] must name a timeline file")
    tl = _read_timeline_file(os.path.join(base_dir, tl_name))

    s_kw = net.base.s_base / 1e3
    dt_h = dt_min / 60.0
    rate = s_kw * dt_h  # currency/kWh -> currency per pu per interval

    padded = intervals + horizon
    if tl.shape[0] < intervals:
        raise ScenarioError(
            f"timeline has {tl.shape[0]} rows, scenario needs {intervals}"
        )
    tl = tl[:intervals]
    pad_rows = np.repeat(tl[-1:], padded - tl.shape[0], axis=0)
    tl = np.vstack([tl, pad_rows])
    tariff_raw = tl[:, 1]
    load_p_scale = tl[:, 2]
    load_q_scale = tl[:, 3]
    pv_scale = tl[:, 4]

    costs = _kv_pairs(sections.get("costs", []))
    beta_loss = _get(costs, "beta_loss", 0.075) * rate
    beta_curt_default = _get(costs, "beta_curt", 0.506) * rate
    beta_bess_default = _get(costs, "beta_bess", 0.1519) * rate

    # microgrids
    mg_specs = []
    mg_buses = []
    mg_sections = sorted(
        s for s in sections if s.startswith("microgrid.")
    )
    native_absorbed = set()
    mg_pv, mg_lp, mg_lq, mg_lac = [], [], [], []
    for name in mg_sections:
        kv = _kv_pairs(sections[name])
        src = int(name.split(".", 1)[1])
        bus = net.internal_id(int(kv.get("bus", src)))
        if not net.buses[bus].has_microgrid:
            raise ScenarioError(f"bus {src} is not flagged as a microgrid")
        cap = _get(kv, "capacity_kwh") / s_kw
        p_max = _get(kv, "p_max_kw") / s_kw
        eta = _get(kv, "eta_h", 0.225)
        beta_b = _get(kv, "beta_bess", beta_bess_default / rate) * rate
        bess = BessSpec.from_capacity(cap, p_max, eta, beta_b=beta_b)
        inv = InverterSpec(
            s_inv=_get(kv, "s_inv_kva") / s_kw,
            segments=int(_get(kv, "segments", 16)),
        )
        pv_peak = _get(kv, "pv_peak_kw") / s_kw
        own_p = _get(kv, "load_peak_kw", 0.0) / s_kw
        pf = _get(kv, "load_pf", 0.8)
        own_q = own_p * np.tan(np.arccos(pf))
        native_p = float(net.p_load_peak[bus])
        native_q = float(net.q_load_peak[bus])
        peak_p = native_p + own_p
        peak_q = native_q + own_q
        omega = float(np.arctan2(peak_q, peak_p)) if peak_p > 0 else 0.0
        ac_share = _get(kv, "ac_share", 0.5)

        pv = pv_peak * pv_scale
        lp = peak_p * load_p_scale
        lq = peak_q * load_q_scale
        lac = ac_share * lp
        spec = MicrogridSpec(
            bus=bus, bess=bess, inverter=inv,
            pv_forecast=pv, load_forecast_p=lp, load_forecast_q=lq,
            load_ac_p=lac, omega=omega,
            e_init=_get(kv, "e_init_frac", 0.5) * cap,
        )
        mg_specs.append(spec)
        mg_buses.append(bus)
        native_absorbed.add(bus)
        mg_pv.append(pv)
        mg_lp.append(lp)
        mg_lq.append(lq)
        mg_lac.append(lac)

    declared = set(int(b) for b in net.mg_buses)
    if declared != set(mg_buses):
        raise ScenarioError(
            f"network declares microgrids at {sorted(declared)} but the "
            f"scenario configures {sorted(set(mg_buses))}"
        )

    # bus load profiles; microgrid buses are absorbed into the forecasts
    p_load = np.outer(net.p_load_peak, load_p_scale)
    q_load = np.outer(net.q_load_peak, load_q_scale)
    for b in native_absorbed:
        p_load[b, :] = 0.0
        q_load[b, :] = 0.0
    if net.p_load_peak[net.root] != 0 or net.q_load_peak[net.root] != 0:
        raise ScenarioError("the substation bus must carry no load")

    beta_curt = np.full(net.n_bus, beta_curt_default)

    anc = _kv_pairs(sections.get("ancillary", []))
    as_params = None
    peak = 0.0
    if anc and anc.get("enabled", "true").lower() not in ("false", "0", "no"):
        peak = _get(anc, "peak_exchange_kw") / s_kw
        p_min = _get(anc, "p_min_factor", 0.5) * peak
        q_min = _get(anc, "q_min_factor", 0.33) * p_min
        cos_phi = _get(anc, "cos_phi", 0.95)
        as_params = AsParameters(
            p_min=p_min,
            q_min=q_min,
            tan_phi=float(np.tan(np.arccos(cos_phi))),
            c_p=_get(anc, "c_p", 5.0) * rate,
            m_p=_get(anc, "big_m_factor", 20.0) * peak,
            zeta=_get(anc, "zeta", 1e-8),
            v_tr_pct=_get(anc, "v_tr_pct", 10.0),
            s_tr=_get(anc, "s_tr_kva", 5000.0) / s_kw,
        )

    timeline = ScenarioTimeline(
        intervals=intervals,
        dt_min=dt_min,
        tariff=tariff_raw * rate,
        tariff_raw=tariff_raw,
        p_load=p_load,
        q_load=q_load,
        mg_buses=mg_buses,
        mg_index={b: i for i, b in enumerate(mg_buses)},
        mg_pv=mg_pv,
        mg_load_p=mg_lp,
        mg_load_q=mg_lq,
        mg_load_ac=mg_lac,
        beta_loss=beta_loss,
        beta_curt=beta_curt,
        as_params=as_params,
        peak_exchange_estimate=peak,
    )

    solver_kv = _kv_pairs(sections.get("solver", []))
    solver = SolverOptions(
        eps_abs=_get(solver_kv, "eps_abs", 1e-6),
        eps_rel=_get(solver_kv, "eps_rel", 1e-6),
        max_iter=int(_get(solver_kv, "max_iter", 100_000)),
        sigma=_get(solver_kv, "sigma", 1e-6),
        rho=_get(solver_kv, "rho", 0.1),
    )

    admm_kv = _kv_pairs(sections.get("admm", []))
    admm = AdmmSettings(
        rho=_get(admm_kv, "rho", 160.0),
        epsilon=_get(admm_kv, "epsilon", 1e-4),
        max_iters=int(_get(admm_kv, "max_iters", 1000)),
        graph=admm_kv.get("graph", "complete"),
        rho_stage2=(float(admm_kv["rho_stage2"])
                    if "rho_stage2" in admm_kv else None),
        eps_switch=(float(admm_kv["eps_switch"])
                    if "eps_switch" in admm_kv else None),
    )

    return Scenario(
        timeline=timeline,
        mg_specs=mg_specs,
        as_params=as_params,
        limits=OperatingLimits.from_network(net, v_min, v_max),
        slack_v=slack_v,
        intervals=intervals,
        horizon=horizon,
        dt_min=dt_min,
        solver=solver,
        admm=admm,
        s_kw=s_kw,
    )
