"""Assembly of the multi-interval scheduling problem over the full network.

One interval's decision block stacks line flows, bus injections, squared
voltages, squared currents, the substation exchange pair, per-bus
curtailment, per-microgrid battery/inverter/energy variables, and (when the
voltage-support tariff is active) the tariff auxiliaries with their three
binaries.  The helpers here are shared with the distributed formulation,
which assembles the same network rows but leaves microgrid-bus injections
as free consensus variables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .microgrid import MG_LOCAL_VARS, MicrogridSpec, build_mg_constraints
from .miqp import MiqpProblem
from .network import RadialNetwork
from .powerflow import LinearizationPoint, OperatingLimits, linearize_current
from .voltage_support import (
    AS_BINARY_LOCALS,
    AS_LOCAL_VARS,
    N_AS_LOCAL,
    AsParameters,
    build_as_block,
)

_FIELDS = ("pf", "qf", "pinj", "qinj", "vsq", "isq", "pex", "qex",
           "pcurt", "pbat", "qinv", "e", "asv")


class VarLayout:
    """Column indexing for the interval-stacked decision vector."""

    def __init__(self, net: RadialNetwork, n_mg: int, horizon: int,
                 with_as: bool):
        nl, nb = net.n_line, net.n_bus
        sizes = {
            "pf": nl, "qf": nl, "pinj": nb, "qinj": nb, "vsq": nb,
            "isq": nl, "pex": 1, "qex": 1, "pcurt": nb,
            "pbat": n_mg, "qinv": n_mg, "e": n_mg,
            "asv": N_AS_LOCAL if with_as else 0,
        }
        self.offsets = {}
        off = 0
        for f in _FIELDS:
            self.offsets[f] = off
            off += sizes[f]
        self.sizes = sizes
        self.stride = off
        self.horizon = horizon
        self.n = off * horizon
        self.with_as = with_as
        self.n_mg = n_mg
        self.net = net

    def idx(self, k: int, field: str, i: int = 0) -> int:
        return k * self.stride + self.offsets[field] + i

    def block(self, k: int, field: str) -> np.ndarray:
        base = k * self.stride + self.offsets[field]
        return base + np.arange(self.sizes[field])

    def binaries(self) -> np.ndarray:
        if not self.with_as:
            return np.array([], dtype=int)
        out = []
        for k in range(self.horizon):
            for j in AS_BINARY_LOCALS:
                out.append(self.idx(k, "asv", j))
        return np.array(out, dtype=int)

    def names(self) -> list:
        out = [""] * self.n
        for k in range(self.horizon):
            for f in _FIELDS:
                for i in range(self.sizes[f]):
                    label = f if self.sizes[f] > 1 else f
                    if f == "asv":
                        out[self.idx(k, f, i)] = f"{AS_LOCAL_VARS[i]}_{k}"
                    else:
                        out[self.idx(k, f, i)] = f"{label}{i}_{k}"
        return out


class _RowBuffer:
    """COO triplet accumulator with row bounds."""

    def __init__(self, n_cols: int):
        self.n_cols = n_cols
        self.rows, self.cols, self.vals = [], [], []
        self.lb, self.ub = [], []

    def add(self, cols, vals, lo, hi):
        r = len(self.lb)
        for c, v in zip(cols, vals):
            if v != 0.0:
                self.rows.append(r)
                self.cols.append(int(c))
                self.vals.append(float(v))
        self.lb.append(lo)
        self.ub.append(hi)

    def matrix(self):
        m = len(self.lb)
        a = sp.coo_matrix(
            (self.vals, (self.rows, self.cols)), shape=(m, self.n_cols)
        ).tocsc()
        return a, np.array(self.lb), np.array(self.ub)


def emit_network_rows(buf: _RowBuffer, lay: VarLayout, net: RadialNetwork,
                      lin_points, p_load, q_load):
    """Branch-flow balances, voltage drops, linearized currents, the root
    exchange tie, and non-microgrid injection definitions for every
    interval.

    p_load/q_load are (n_bus, horizon) with zeros at microgrid buses.
    Microgrid-bus injections are never defined here: the centralized
    problem couples them to microgrid internals and the distributed one
    treats them as consensus copies.
    """
    mg_set = set(int(b) for b in net.mg_buses)
    root = net.root
    for k in range(lay.horizon):
        coef_p, coef_q, coef_v, const = linearize_current(lin_points[k])
        for b in range(net.n_bus):
            # active / reactive balance at bus b
            cols, vals = [lay.idx(k, "pinj", b)], [-1.0]
            cols_q, vals_q = [lay.idx(k, "qinj", b)], [-1.0]
            if b != root:
                li = net.line_of_bus[b]
                cols.append(lay.idx(k, "pf", li)); vals.append(-1.0)
                cols_q.append(lay.idx(k, "qf", li)); vals_q.append(-1.0)
            for c in net.children[b]:
                lc = net.line_of_bus[c]
                cols.append(lay.idx(k, "pf", lc)); vals.append(1.0)
                cols.append(lay.idx(k, "isq", lc)); vals.append(net.r[lc])
                cols_q.append(lay.idx(k, "qf", lc)); vals_q.append(1.0)
                cols_q.append(lay.idx(k, "isq", lc)); vals_q.append(net.x[lc])
            buf.add(cols, vals, 0.0, 0.0)
            buf.add(cols_q, vals_q, 0.0, 0.0)

        for li in range(net.n_line):
            f, t = net.line_from_bus[li], net.line_to_bus[li]
            # voltage drop along the line
            buf.add(
                [lay.idx(k, "vsq", f), lay.idx(k, "vsq", t),
                 lay.idx(k, "pf", li), lay.idx(k, "qf", li),
                 lay.idx(k, "isq", li)],
                [1.0, -1.0, -2.0 * net.r[li], -2.0 * net.x[li],
                 -(net.r[li] ** 2 + net.x[li] ** 2)],
                0.0, 0.0,
            )
            # first-order squared-current model
            buf.add(
                [lay.idx(k, "isq", li), lay.idx(k, "pf", li),
                 lay.idx(k, "qf", li), lay.idx(k, "vsq", t)],
                [1.0, -coef_p[li], -coef_q[li], -coef_v[li]],
                const[li], const[li],
            )

        # substation exchange enters as the root injection
        buf.add([lay.idx(k, "pinj", root), lay.idx(k, "pex")],
                [1.0, -1.0], 0.0, 0.0)
        buf.add([lay.idx(k, "qinj", root), lay.idx(k, "qex")],
                [1.0, -1.0], 0.0, 0.0)

        for b in range(net.n_bus):
            if b == root or b in mg_set:
                continue
            pl = float(p_load[b, k])
            ql = float(q_load[b, k])
            tan_b = ql / pl if pl > 1e-12 else 0.0
            buf.add([lay.idx(k, "pinj", b), lay.idx(k, "pcurt", b)],
                    [1.0, -1.0], -pl, -pl)
            buf.add([lay.idx(k, "qinj", b), lay.idx(k, "pcurt", b)],
                    [1.0, -tan_b], -ql, -ql)


def emit_as_rows(buf: _RowBuffer, lay: VarLayout, params: AsParameters):
    for k in range(lay.horizon):
        block = build_as_block(k, params)
        base = [lay.idx(k, "asv", j) for j in range(N_AS_LOCAL)]
        base += [lay.idx(k, "pex"), lay.idx(k, "qex")]
        for r in range(block.rows.shape[0]):
            nz = np.flatnonzero(block.rows[r])
            buf.add([base[j] for j in nz], block.rows[r, nz],
                    block.row_lb[r], block.row_ub[r])


def emit_mg_rows(buf: _RowBuffer, lay: VarLayout, var_lb, var_ub,
                 mg_specs, horizon: int):
    """Map each microgrid's local constraint set onto the global columns."""
    for m, spec in enumerate(mg_specs):
        cset = build_mg_constraints(spec, horizon)
        gcol = np.empty(horizon * len(MG_LOCAL_VARS), dtype=int)
        for k in range(horizon):
            mapping = {
                "p_bat": lay.idx(k, "pbat", m),
                "p_curt": lay.idx(k, "pcurt", spec.bus),
                "e": lay.idx(k, "e", m),
                "q_inv": lay.idx(k, "qinv", m),
                "p_inj": lay.idx(k, "pinj", spec.bus),
                "q_inj": lay.idx(k, "qinj", spec.bus),
            }
            for j, name in enumerate(MG_LOCAL_VARS):
                gcol[k * len(MG_LOCAL_VARS) + j] = mapping[name]
        for r in range(cset.rows.shape[0]):
            nz = np.flatnonzero(cset.rows[r])
            buf.add(gcol[nz], cset.rows[r, nz], cset.row_lb[r], cset.row_ub[r])
        keep = np.isfinite(cset.var_lb) | np.isfinite(cset.var_ub)
        for j in np.flatnonzero(keep):
            var_lb[gcol[j]] = max(var_lb[gcol[j]], cset.var_lb[j])
            var_ub[gcol[j]] = min(var_ub[gcol[j]], cset.var_ub[j])


def base_var_bounds(lay: VarLayout, net: RadialNetwork,
                    limits: OperatingLimits, p_load, slack_v: float,
                    pin_mg_curtailment: bool = False):
    """Box bounds for flows, voltages, and curtailment; injections and
    squared currents stay free (they are pinned by equality rows).

    pin_mg_curtailment fixes microgrid-bus curtailment to zero, used by the
    network agent whose problem does not own those variables.
    """
    lb = np.full(lay.n, -np.inf)
    ub = np.full(lay.n, np.inf)
    mg_set = set(int(b) for b in net.mg_buses)
    for k in range(lay.horizon):
        pf = lay.block(k, "pf")
        qf = lay.block(k, "qf")
        lb[pf], ub[pf] = -limits.p_max, limits.p_max
        lb[qf], ub[qf] = -limits.q_max, limits.q_max
        vs = lay.block(k, "vsq")
        lb[vs], ub[vs] = limits.v_min_sq, limits.v_max_sq
        root_v = lay.idx(k, "vsq", net.root)
        lb[root_v] = ub[root_v] = slack_v**2
        for b in range(net.n_bus):
            c = lay.idx(k, "pcurt", b)
            if b == net.root:
                lb[c] = ub[c] = 0.0
            elif b in mg_set:
                if pin_mg_curtailment:
                    lb[c] = ub[c] = 0.0
            else:
                lb[c], ub[c] = 0.0, float(p_load[b, k])
    return lb, ub


@dataclass
class StageProblem:
    """A built problem plus the layout needed to read solutions back."""

    problem: MiqpProblem
    layout: VarLayout
    mg_specs: list


def assemble_centralized(
    net: RadialNetwork,
    as_params: AsParameters | None,
    mg_specs: list,
    timeline,
    horizon: int,
    stage: int = 0,
    lin_points=None,
    e_init=None,
    voltage_support: bool = True,
    limits: OperatingLimits | None = None,
    slack_v: float = 1.0,
) -> StageProblem:
    """Build the full scheduling problem for one receding-horizon stage.

    timeline supplies per-interval tariffs, loads, and cost rates (see
    scenario.ScenarioTimeline); microgrid forecasts are windowed to
    [stage, stage + horizon) and e_init (per microgrid) overrides the
    stored-energy state.  With voltage_support off, the tariff block and its
    binaries are omitted and the exchange is unconstrained.
    """
    with_as = voltage_support and as_params is not None
    limits = limits or OperatingLimits.from_network(net)
    lay = VarLayout(net, len(mg_specs), horizon, with_as)

    window = [stage + k for k in range(horizon)]
    staged = [
        stage_mg_spec(spec, timeline, window,
                      None if e_init is None else e_init[m])
        for m, spec in enumerate(mg_specs)
    ]
    p_load = timeline.p_load[:, window]
    q_load = timeline.q_load[:, window]

    if lin_points is None:
        lin_points = [LinearizationPoint.flat(net.n_line)] * horizon
    elif isinstance(lin_points, LinearizationPoint):
        lin_points = [lin_points] * horizon

    buf = _RowBuffer(lay.n)
    emit_network_rows(buf, lay, net, lin_points, p_load, q_load)
    var_lb, var_ub = base_var_bounds(lay, net, limits, p_load, slack_v)
    emit_mg_rows(buf, lay, var_lb, var_ub, staged, horizon)
    if with_as:
        emit_as_rows(buf, lay, as_params)

    c = np.zeros(lay.n)
    for k in range(horizon):
        c[lay.idx(k, "pex")] += float(timeline.tariff[stage + k])
        c[lay.block(k, "isq")] += timeline.beta_loss * net.r
        c[lay.block(k, "pcurt")] += timeline.beta_curt
        for m, spec in enumerate(staged):
            c[lay.idx(k, "pbat", m)] += spec.bess.beta_b
        if with_as:
            c[lay.idx(k, "asv", 0)] += as_params.c_p

    a_mat, row_lb, row_ub = buf.matrix()
    prob = MiqpProblem(
        c=c, a_mat=a_mat, row_lb=row_lb, row_ub=row_ub,
        var_lb=var_lb, var_ub=var_ub, binaries=lay.binaries(),
        meta={"layout": lay},
    )
    return StageProblem(problem=prob, layout=lay, mg_specs=staged)


def stage_mg_spec(spec: MicrogridSpec, timeline, window, e_init=None):
    """Window a microgrid's forecasts to the stage horizon."""
    from dataclasses import replace

    idx = np.asarray(window, dtype=int)
    return replace(
        spec,
        pv_forecast=timeline.mg_pv[timeline.mg_index[spec.bus]][idx],
        load_forecast_p=timeline.mg_load_p[timeline.mg_index[spec.bus]][idx],
        load_forecast_q=timeline.mg_load_q[timeline.mg_index[spec.bus]][idx],
        load_ac_p=timeline.mg_load_ac[timeline.mg_index[spec.bus]][idx],
        e_init=spec.e_init if e_init is None else float(e_init),
    )


def extract_stage(lay: VarLayout, x: np.ndarray, k: int) -> dict:
    """Per-interval view of a solution vector as named arrays."""
    out = {}
    for f in _FIELDS:
        if lay.sizes[f] == 0:
            continue
        vals = x[lay.block(k, f)]
        out[f] = float(vals[0]) if lay.sizes[f] == 1 else vals
    return out
