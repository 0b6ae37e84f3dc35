"""Fully distributed consensus optimization over one network agent and N
microgrid agents.

Every agent keeps its own copy of the shared vector (the microgrid-bus
injection pairs over the horizon), updates its multipliers locally from the
gap to its neighbors' copies, and re-solves its subproblem with a proximal
pull toward the average of its own previous copy and each neighbor's copy.
Rounds are synchronous: all solves in a round see the same previous-round
messages, so results do not depend on agent ordering.  Multipliers are
never communicated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .centralized import VarLayout, _RowBuffer
from .microgrid import MG_LOCAL_VARS, MicrogridSpec, build_mg_constraints
from .miqp import (
    OPTIMAL,
    MiqpProblem,
    SolverOptions,
    solve_convex,
    solve_miqp,
)
from .voltage_support import AS_BINARY_LOCALS, N_AS_LOCAL, build_as_block


class AdmmError(RuntimeError):
    pass


class MissingNeighborMessage(AdmmError):
    pass


class SubproblemInfeasible(AdmmError):
    pass


class ZeroDenominator(ValueError):
    pass


class AllComponentsSkipped(ValueError):
    pass


@dataclass(frozen=True)
class CommGraph:
    """Communication graph over agent ids 0..n_agents-1 (0 = network agent).

    Must be connected with every microgrid agent adjacent to agent 0.
    """

    n_agents: int
    edges: frozenset

    def __post_init__(self):
        for a, b in self.edges:
            if not (0 <= a < self.n_agents and 0 <= b < self.n_agents) or a == b:
                raise AdmmError(f"bad edge ({a},{b})")
        nbrs = self.neighbors
        for m in range(1, self.n_agents):
            if 0 not in nbrs[m]:
                raise AdmmError(f"agent {m} cannot reach the network agent")
        seen = {0}
        stack = [0]
        while stack:
            for m in nbrs[stack.pop()]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        if len(seen) != self.n_agents:
            raise AdmmError("communication graph is not connected")

    @property
    def neighbors(self):
        out = [set() for _ in range(self.n_agents)]
        for a, b in self.edges:
            out[a].add(b)
            out[b].add(a)
        return tuple(tuple(sorted(s)) for s in out)

    @classmethod
    def complete(cls, n_mg: int) -> "CommGraph":
        n = n_mg + 1
        edges = frozenset(
            (a, b) for a in range(n) for b in range(a + 1, n)
        )
        return cls(n, edges)

    @classmethod
    def star(cls, n_mg: int) -> "CommGraph":
        return cls(n_mg + 1, frozenset((0, m) for m in range(1, n_mg + 1)))

    @classmethod
    def ring(cls, n_mg: int) -> "CommGraph":
        # star spokes guarantee network-agent adjacency; ring among microgrids
        n = n_mg + 1
        edges = {(0, m) for m in range(1, n)}
        for m in range(1, n):
            nxt = m + 1 if m + 1 < n else 1
            if nxt != m:
                edges.add((min(m, nxt), max(m, nxt)))
        return cls(n, frozenset(edges))


@dataclass(frozen=True)
class SharedLayout:
    """Flattened indexing of the shared injection copies.

    Component order is bus-major, then active-before-reactive, then
    interval: index(j, comp, k) = (2*j + comp) * horizon + k.

    scale converts the agents' internal per-unit injections into the units
    the consensus layer exchanges (kW when scale is the kVA base / 1000);
    penalty and tolerance values then act on physically-sized quantities.
    """

    mg_buses: tuple
    horizon: int
    scale: float = 1.0

    @property
    def size(self) -> int:
        return 2 * len(self.mg_buses) * self.horizon

    def index(self, j: int, comp: int, k: int) -> int:
        return (2 * j + comp) * self.horizon + k

    def components(self):
        for j, bus in enumerate(self.mg_buses):
            for comp in (0, 1):
                for k in range(self.horizon):
                    yield self.index(j, comp, k), bus, comp, k


@dataclass
class AdmmConfig:
    rho: float
    epsilon: float
    max_iters: int = 1000
    graph: CommGraph | None = None
    rho_stage2: float | None = None
    eps_switch: float | None = None

    def __post_init__(self):
        if not self.rho > 0 or not self.epsilon > 0:
            raise AdmmError("rho and epsilon must be positive")


@dataclass
class AgentState:
    id: int
    y: np.ndarray
    y_hat: np.ndarray
    lam: np.ndarray
    neighbor_y: dict
    z: np.ndarray | None = None
    cost_only: float = 0.0


def dual_update(state: AgentState, rho: float) -> np.ndarray:
    """Multiplier step from the gaps to the stored neighbor copies."""
    lam = state.lam.copy()
    for m, y_m in state.neighbor_y.items():
        if y_m is None:
            raise MissingNeighborMessage(f"agent {state.id} missing y from {m}")
        lam += rho * (state.y - y_m)
    return lam


def consensus_terms(cols, lam, y_hat, neighbor_ys, rho, c, quad):
    """Add the proximal pull toward neighbor averages onto global columns.

    cols[s] is the problem column of shared component s.  Returns nothing;
    c and quad are modified in place.
    """
    n_nb = len(neighbor_ys)
    quad[cols] += rho * n_nb
    pull = np.zeros_like(lam)
    for y_m in neighbor_ys:
        pull += 0.5 * (y_hat + y_m)
    c[cols] += lam - rho * pull


class Agent:
    """Interface: id 0 is the network agent, 1..N are microgrids."""

    id: int
    shared_size: int

    def solve(self, lam, y_hat, neighbor_ys, rho):
        raise NotImplementedError


class AdnAgent(Agent):
    """Network operator: flow physics, limits, tariff block, and the cost of
    energy imports net of the microgrid injections.

    Works in the reduced injection space; full network states are
    reconstructed on demand through the stored sensitivities."""

    def __init__(self, net, as_params, timeline, horizon, shared: SharedLayout,
                 stage: int = 0, lin_points=None, limits=None,
                 slack_v: float = 1.0, voltage_support: bool = True,
                 options: SolverOptions | None = None,
                 backend: str = "branch_and_bound"):
        self.id = 0
        self.net = net
        self.shared = shared
        self.shared_size = shared.size
        self.opts = options or SolverOptions()
        self.backend = backend
        self.with_as = voltage_support and as_params is not None
        self.horizon = horizon
        self._prev_x = None
        self._feas_cache = [None] * horizon

        built = build_adn_subproblem(
            net, as_params, timeline, horizon, shared,
            stage=stage, lin_points=lin_points, limits=limits,
            slack_v=slack_v, voltage_support=voltage_support,
        )
        self._template, self._c_base, self._shared_cols, self._red = built
        self.layout = VarLayout(net, 0, horizon, self.with_as)

    def _feasible_assignments(self, k):
        """Binary assignments with a nonempty restriction for interval k.

        Feasibility does not depend on the objective, and the agent's
        constraint data never changes between consensus rounds, so this is
        probed once per interval with pure-LP solves and cached."""
        if self._feas_cache[k] is not None:
            return self._feas_cache[k]
        sub = self._red["per_k"][k]
        bins = [int(j) for j in sub.binaries]
        feasible = []
        probe = MiqpProblem(
            c=np.zeros(sub.n), a_mat=sub.a_mat, row_lb=sub.row_lb,
            row_ub=sub.row_ub, var_lb=sub.var_lb, var_ub=sub.var_ub,
        )
        for code in range(1 << len(bins)):
            lb = sub.var_lb.copy()
            ub = sub.var_ub.copy()
            for pos, j in enumerate(bins):
                lb[j] = ub[j] = float((code >> pos) & 1)
            sol = solve_convex(probe, self.opts, var_lb=lb, var_ub=ub)
            if sol.status == OPTIMAL:
                feasible.append(code)
        if not feasible:
            raise SubproblemInfeasible(
                f"network agent interval {k}: no feasible tariff assignment"
            )
        self._feas_cache[k] = feasible
        return feasible

    def solve(self, lam, y_hat, neighbor_ys, rho):
        """Exact subproblem solve, one interval at a time.

        The tariff binaries are the only integrality and the subproblem has
        no temporal coupling, so each interval's 3-binary problem is solved
        to global optimality by enumerating the (cached) feasible
        assignments with warm-started convex solves."""
        full_c = self._c_base.copy()
        quad_full = np.zeros(self._template.n)
        consensus_terms(self._shared_cols, lam, y_hat, neighbor_ys, rho,
                        full_c, quad_full)
        red = self._red
        stride = red["stride"]
        x = np.empty(self._template.n)
        cost_only = 0.0
        if self._prev_x is None:
            self._prev_x = [dict() for _ in range(self.horizon)]
        for k in range(self.horizon):
            sub = red["per_k"][k]
            sl = slice(k * stride, (k + 1) * stride)
            inst = MiqpProblem(
                c=full_c[sl], a_mat=sub.a_mat, row_lb=sub.row_lb,
                row_ub=sub.row_ub, var_lb=sub.var_lb, var_ub=sub.var_ub,
                quad_diag=quad_full[sl], obj_const=sub.obj_const,
            )
            bins = [int(j) for j in sub.binaries]
            warm_cache = self._prev_x[k]
            best = None
            if bins:
                for code in self._feasible_assignments(k):
                    lb = sub.var_lb.copy()
                    ub = sub.var_ub.copy()
                    for pos, j in enumerate(bins):
                        lb[j] = ub[j] = float((code >> pos) & 1)
                    sol = solve_convex(inst, self.opts, var_lb=lb, var_ub=ub,
                                       warm=warm_cache.get(code))
                    if sol.status != OPTIMAL:
                        continue
                    warm_cache[code] = (sol.x, getattr(sol, "_raw_y", None))
                    if (best is None
                            or sol.objective_value < best.objective_value - 1e-9):
                        best = sol
            else:
                best = solve_convex(inst, self.opts, warm=warm_cache.get(0))
                if best.status != OPTIMAL:
                    best = None
                else:
                    warm_cache[0] = (best.x, getattr(best, "_raw_y", None))
            if best is None:
                raise SubproblemInfeasible(
                    f"network agent subproblem (interval {k}) infeasible"
                )
            x[sl] = best.x
            cost_only += float(self._c_base[sl] @ best.x) + sub.obj_const
        y_new = x[self._shared_cols].copy()
        return y_new, cost_only, SimpleNamespace(x=x)

    def full_solution(self, x_reduced) -> np.ndarray:
        """Reconstruct the full per-interval network state vector."""
        red = self._red
        lay = self.layout
        full = np.zeros(lay.n)
        for k in range(self.horizon):
            sens = red["sens"][k]
            offs = red["offs"][k]
            idx = red["idx"][k]
            base = k * red["stride"]
            w = x_reduced[base:base + red["n_w"]]
            u = sens @ w + offs
            nl = self.net.n_line
            full[lay.block(k, "pf")] = u[idx["pf"]:idx["pf"] + nl]
            full[lay.block(k, "qf")] = u[idx["qf"]:idx["qf"] + nl]
            full[lay.block(k, "isq")] = u[idx["i"]:idx["i"] + nl]
            vsq = np.full(self.net.n_bus, red["slack_sq"])
            for b, pos in idx["v_pos"].items():
                vsq[b] = u[idx["v"] + pos]
            full[lay.block(k, "vsq")] = vsq
            full[lay.idx(k, "pex")] = u[idx["pex"]]
            full[lay.idx(k, "qex")] = u[idx["qex"]]
            pcurt = np.zeros(self.net.n_bus)
            pinj = np.zeros(self.net.n_bus)
            qinj = np.zeros(self.net.n_bus)
            for pos, b in enumerate(idx["free_buses"]):
                pcurt[b] = w[pos]
                pl = float(red["p_load"][b, k])
                ql = float(red["q_load"][b, k])
                tan_b = ql / pl if pl > 1e-12 else 0.0
                pinj[b] = pcurt[b] - pl
                qinj[b] = tan_b * pcurt[b] - ql
            n_c = idx["n_c"]
            n_mg = len(self.shared.mg_buses)
            for j, bus in enumerate(self.shared.mg_buses):
                pinj[bus] = w[n_c + j]
                qinj[bus] = w[n_c + n_mg + j]
            pinj[self.net.root] = u[idx["pex"]]
            qinj[self.net.root] = u[idx["qex"]]
            full[lay.block(k, "pcurt")] = pcurt
            full[lay.block(k, "pinj")] = pinj
            full[lay.block(k, "qinj")] = qinj
            if self.with_as:
                full[lay.block(k, "asv")] = x_reduced[
                    base + red["n_w"]:base + red["n_w"] + N_AS_LOCAL
                ]
        return full


class MgAgent(Agent):
    """One microgrid: storage, inverter, curtailment, plus its copy of every
    shared injection (only its own bus's pair is physically constrained)."""

    def __init__(self, agent_id: int, spec: MicrogridSpec, tariff,
                 beta_curt: float, shared: SharedLayout, horizon: int,
                 options: SolverOptions | None = None):
        self.id = agent_id
        self.shared = shared
        self.shared_size = shared.size
        self.opts = options or SolverOptions()
        self._prev = None
        built = build_mg_subproblem(spec, tariff, beta_curt, shared, horizon)
        self._template, self._c_base, self._shared_cols = built

    def solve(self, lam, y_hat, neighbor_ys, rho):
        prob = self._template
        c = self._c_base.copy()
        quad = np.zeros(prob.n)
        consensus_terms(self._shared_cols, lam, y_hat, neighbor_ys, rho,
                        c, quad)
        inst = MiqpProblem(
            c=c, a_mat=prob.a_mat, row_lb=prob.row_lb, row_ub=prob.row_ub,
            var_lb=prob.var_lb, var_ub=prob.var_ub, quad_diag=quad,
        )
        sol = solve_convex(inst, self.opts,
                           warm=(self._prev, None) if self._prev is not None
                           else None)
        if sol.status != OPTIMAL:
            raise SubproblemInfeasible(
                f"microgrid agent {self.id} subproblem ended {sol.status}"
            )
        self._prev = sol.x
        y_new = sol.x[self._shared_cols].copy()
        cost_only = float(self._c_base @ sol.x)
        return y_new, cost_only, sol


def _network_sensitivities(net, lin_point, p_load_k, q_load_k, slack_v):
    """Express the network state as an affine map of the free injections.

    On a radial feeder with the linearized squared-current model, the flow
    balances, voltage drops, and current equations form a square linear
    system in u = [p_flow, q_flow, v_sq(non-root), i_sq, p_ex, q_ex] once
    the bus injections are given.  Free inputs w are the non-microgrid
    curtailments followed by the microgrid injection copies (active block
    then reactive block, microgrids in bus order):

        u = sens @ w + offs

    Returns (sens, offs, index dicts).
    """
    import scipy.sparse as sp
    from scipy.sparse.linalg import splu

    from .powerflow import linearize_current

    nl, nb = net.n_line, net.n_bus
    root = net.root
    mg = [int(b) for b in net.mg_buses]
    mg_pos = {b: i for i, b in enumerate(mg)}
    free_buses = [b for b in range(nb) if b != root and b not in mg_pos]
    n_c = len(free_buses)
    n_w = n_c + 2 * len(mg)

    # u layout
    u_pf = 0
    u_qf = nl
    non_root = [b for b in range(nb) if b != root]
    v_pos = {b: i for i, b in enumerate(non_root)}
    u_v = 2 * nl
    u_i = 2 * nl + len(non_root)
    u_pex = u_i + nl
    u_qex = u_pex + 1
    n_u = u_qex + 1

    coef_p, coef_q, coef_v, const = linearize_current(lin_point)

    e_rows, e_cols, e_vals = [], [], []
    f_rows, f_cols, f_vals = [], [], []
    g = np.zeros(n_u)
    r_idx = 0

    def e_add(col, val):
        e_rows.append(r_idx)
        e_cols.append(col)
        e_vals.append(val)

    def f_add(col, val):
        f_rows.append(r_idx)
        f_cols.append(col)
        f_vals.append(val)

    def v_col(b):
        return None if b == root else u_v + v_pos[b]

    for b in range(nb):
        # active balance: sum_child(pf + r i) - pf_in - pinj = 0
        for c in net.children[b]:
            lc = net.line_of_bus[c]
            e_add(u_pf + lc, 1.0)
            e_add(u_i + lc, net.r[lc])
        if b != root:
            e_add(u_pf + net.line_of_bus[b], -1.0)
        if b == root:
            e_add(u_pex, -1.0)
        elif b in mg_pos:
            f_add(n_c + mg_pos[b], 1.0)
        else:
            f_add(free_buses.index(b), 1.0)
            g[r_idx] += -float(p_load_k[b])
        r_idx += 1
        # reactive balance
        for c in net.children[b]:
            lc = net.line_of_bus[c]
            e_add(u_qf + lc, 1.0)
            e_add(u_i + lc, net.x[lc])
        if b != root:
            e_add(u_qf + net.line_of_bus[b], -1.0)
        if b == root:
            e_add(u_qex, -1.0)
        elif b in mg_pos:
            f_add(n_c + len(mg) + mg_pos[b], 1.0)
        else:
            tan_b = (float(q_load_k[b]) / float(p_load_k[b])
                     if p_load_k[b] > 1e-12 else 0.0)
            f_add(free_buses.index(b), tan_b)
            g[r_idx] += -float(q_load_k[b])
        r_idx += 1

    slack_sq = slack_v**2
    for li in range(nl):
        f_b, t_b = net.line_from_bus[li], net.line_to_bus[li]
        # voltage drop
        cf, ct = v_col(f_b), v_col(t_b)
        if cf is None:
            g[r_idx] += -slack_sq
        else:
            e_add(cf, 1.0)
        e_add(ct, -1.0)
        e_add(u_pf + li, -2.0 * net.r[li])
        e_add(u_qf + li, -2.0 * net.x[li])
        e_add(u_i + li, -(net.r[li] ** 2 + net.x[li] ** 2))
        r_idx += 1
        # linearized squared current
        e_add(u_i + li, 1.0)
        e_add(u_pf + li, -coef_p[li])
        e_add(u_qf + li, -coef_q[li])
        e_add(ct, -coef_v[li])
        g[r_idx] += const[li]
        r_idx += 1

    assert r_idx == n_u
    e_mat = sp.coo_matrix((e_vals, (e_rows, e_cols)), shape=(n_u, n_u)).tocsc()
    f_mat = sp.coo_matrix((f_vals, (f_rows, f_cols)), shape=(n_u, n_w)).toarray()
    lu = splu(e_mat)
    # E u = F w + g  =>  u = (E^-1 F) w + E^-1 g
    sens = lu.solve(f_mat)
    offs = lu.solve(g)
    idx = {
        "pf": u_pf, "qf": u_qf, "v": u_v, "i": u_i,
        "pex": u_pex, "qex": u_qex,
        "v_pos": v_pos, "free_buses": free_buses, "n_w": n_w, "n_c": n_c,
    }
    return sens, offs, idx


def build_adn_subproblem(net, as_params, timeline, horizon,
                         shared: SharedLayout, stage: int = 0,
                         lin_points=None, limits=None, slack_v: float = 1.0,
                         voltage_support: bool = True):
    """Network-agent subproblem in the reduced injection space.

    Decision columns per interval: non-microgrid curtailments, this agent's
    copies of the shared microgrid injections, and (when the tariff is
    active) the six tariff auxiliaries.  Flows, voltages, currents, and the
    substation exchange are affine in those via the radial sensitivities,
    so line/voltage limits and tariff rows become dense rows and the whole
    subproblem stays small.  The base cost covers the tariff block, line
    losses, non-microgrid curtailment, and the energy tariff on the
    exchange minus the microgrid injections.
    """
    from .powerflow import LinearizationPoint, OperatingLimits

    with_as = voltage_support and as_params is not None
    limits = limits or OperatingLimits.from_network(net)
    window = [stage + k for k in range(horizon)]
    p_load = timeline.p_load[:, window]
    q_load = timeline.q_load[:, window]
    if lin_points is None:
        lin_points = [LinearizationPoint.flat(net.n_line)] * horizon
    elif isinstance(lin_points, LinearizationPoint):
        lin_points = [lin_points] * horizon

    n_mg = len(shared.mg_buses)
    sens0, offs0, idx = _network_sensitivities(
        net, lin_points[0], p_load[:, 0], q_load[:, 0], slack_v
    )
    n_w = idx["n_w"]
    n_as = N_AS_LOCAL if with_as else 0
    stride = n_w + n_as
    n = stride * horizon

    buf = _RowBuffer(n)
    c = np.zeros(n)
    const = 0.0
    const_k = np.zeros(horizon)
    var_lb = np.full(n, -np.inf)
    var_ub = np.full(n, np.inf)
    binaries = []
    shared_cols = np.empty(shared.size, dtype=int)
    sens_list, offs_list, idx_list = [], [], []

    for k in range(horizon):
        if k == 0:
            sens, offs = sens0, offs0
        else:
            sens, offs, idx = _network_sensitivities(
                net, lin_points[k], p_load[:, k], q_load[:, k], slack_v
            )
        sens_list.append(sens)
        offs_list.append(offs)
        idx_list.append(idx)
        base = k * stride
        wcols = base + np.arange(n_w)
        n_c = idx["n_c"]

        # curtailment boxes on the free buses
        for pos, b in enumerate(idx["free_buses"]):
            var_lb[base + pos] = 0.0
            var_ub[base + pos] = float(p_load[b, k])

        # shared columns: active then reactive blocks, microgrids in order
        for j, bus in enumerate(shared.mg_buses):
            shared_cols[shared.index(j, 0, k)] = base + n_c + j
            shared_cols[shared.index(j, 1, k)] = base + n_c + n_mg + j

        # line-flow and voltage-band rows
        u = idx
        for li in range(net.n_line):
            row = sens[u["pf"] + li]
            buf.add(wcols, row, -limits.p_max[li] - offs[u["pf"] + li],
                    limits.p_max[li] - offs[u["pf"] + li])
            row = sens[u["qf"] + li]
            buf.add(wcols, row, -limits.q_max[li] - offs[u["qf"] + li],
                    limits.q_max[li] - offs[u["qf"] + li])
        for b, pos in u["v_pos"].items():
            row = sens[u["v"] + pos]
            buf.add(wcols, row, limits.v_min_sq - offs[u["v"] + pos],
                    limits.v_max_sq - offs[u["v"] + pos])

        # tariff block with the exchange pair substituted
        if with_as:
            block = build_as_block(k, as_params)
            as_base = base + n_w
            for r in range(block.rows.shape[0]):
                grow = block.rows[r]
                lo, hi = block.row_lb[r], block.row_ub[r]
                if grow[6] != 0.0 or grow[7] != 0.0:
                    dense = grow[6] * sens[u["pex"]] + grow[7] * sens[u["qex"]]
                    shift = grow[6] * offs[u["pex"]] + grow[7] * offs[u["qex"]]
                    buf.add(
                        np.concatenate([wcols, as_base + np.arange(N_AS_LOCAL)]),
                        np.concatenate([dense, grow[:N_AS_LOCAL]]),
                        lo - shift, hi - shift,
                    )
                else:
                    buf.add(as_base + np.arange(N_AS_LOCAL), grow[:N_AS_LOCAL],
                            lo, hi)
            for jb in AS_BINARY_LOCALS:
                col = as_base + jb
                var_lb[col], var_ub[col] = 0.0, 1.0
                binaries.append(col)
            c[as_base + 0] += as_params.c_p

        # objective: tariff on the exchange, losses, curtailment, and the
        # energy credit on the microgrid injection copies
        tariff_k = float(timeline.tariff[stage + k])
        c[wcols] += tariff_k * sens[u["pex"]]
        const_k[k] += tariff_k * offs[u["pex"]]
        loss_w = timeline.beta_loss * (net.r[:, None] * sens[u["i"]:u["i"] + net.n_line]).sum(axis=0)
        c[wcols] += loss_w
        const_k[k] += timeline.beta_loss * float(
            (net.r * offs[u["i"]:u["i"] + net.n_line]).sum()
        )
        for pos, b in enumerate(idx["free_buses"]):
            c[base + pos] += float(timeline.beta_curt[b])
        for j, bus in enumerate(shared.mg_buses):
            c[base + n_c + j] += -tariff_k

    const = float(const_k.sum())
    a_mat, row_lb, row_ub = buf.matrix()
    template = MiqpProblem(
        c=c, a_mat=a_mat, row_lb=row_lb, row_ub=row_ub,
        var_lb=var_lb, var_ub=var_ub,
        binaries=np.array(binaries, dtype=int), obj_const=const,
    )
    # the subproblem has no cross-interval coupling (storage lives with the
    # microgrid agents), so it also ships as one problem per interval: the
    # agent enumerates the 3 tariff binaries interval by interval
    a_csr = a_mat.tocsr()
    per_k = []
    rows_per_k = a_mat.shape[0] // horizon
    bin_local = (np.array([n_w + j for j in AS_BINARY_LOCALS], dtype=int)
                 if with_as else np.array([], dtype=int))
    for k in range(horizon):
        cols = slice(k * stride, (k + 1) * stride)
        rows = slice(k * rows_per_k, (k + 1) * rows_per_k)
        sub = MiqpProblem(
            c=c[cols].copy(),
            a_mat=a_csr[rows, cols].tocsc(),
            row_lb=row_lb[rows].copy(), row_ub=row_ub[rows].copy(),
            var_lb=var_lb[cols].copy(), var_ub=var_ub[cols].copy(),
            binaries=bin_local.copy(), obj_const=float(const_k[k]),
        )
        per_k.append(sub)
    reducer = {
        "sens": sens_list, "offs": offs_list, "idx": idx_list,
        "stride": stride, "n_w": n_w, "horizon": horizon,
        "p_load": p_load, "q_load": q_load, "slack_sq": slack_v**2,
        "per_k": per_k,
    }
    return template, c.copy(), shared_cols, reducer


def build_mg_subproblem(spec: MicrogridSpec, tariff, beta_curt: float,
                        shared: SharedLayout, horizon: int):
    """Microgrid-agent subproblem template (always continuous).

    Columns: 4 locals per interval (battery, curtailment, energy, inverter
    reactive) followed by the full shared vector; the agent's own bus pair
    inside the shared block is tied to its internals by the balance rows.
    """
    cset = build_mg_constraints(spec, horizon)
    n_local = 4 * horizon
    n = n_local + shared.size
    j_own = shared.mg_buses.index(spec.bus)

    local_of = {"p_bat": 0, "p_curt": 1, "e": 2, "q_inv": 3}
    gcol = np.empty(horizon * len(MG_LOCAL_VARS), dtype=int)
    for k in range(horizon):
        for j, name in enumerate(MG_LOCAL_VARS):
            if name == "p_inj":
                g = n_local + shared.index(j_own, 0, k)
            elif name == "q_inj":
                g = n_local + shared.index(j_own, 1, k)
            else:
                g = k * 4 + local_of[name]
            gcol[k * len(MG_LOCAL_VARS) + j] = g

    buf = _RowBuffer(n)
    for r in range(cset.rows.shape[0]):
        nz = np.flatnonzero(cset.rows[r])
        buf.add(gcol[nz], cset.rows[r, nz], cset.row_lb[r], cset.row_ub[r])
    var_lb = np.full(n, -np.inf)
    var_ub = np.full(n, np.inf)
    keep = np.isfinite(cset.var_lb) | np.isfinite(cset.var_ub)
    for j in np.flatnonzero(keep):
        var_lb[gcol[j]] = max(var_lb[gcol[j]], cset.var_lb[j])
        var_ub[gcol[j]] = min(var_ub[gcol[j]], cset.var_ub[j])

    c = np.zeros(n)
    for k in range(horizon):
        c[k * 4 + local_of["p_curt"]] += beta_curt
        c[k * 4 + local_of["p_bat"]] += spec.bess.beta_b
        c[n_local + shared.index(j_own, 0, k)] += float(tariff[k])

    a_mat, row_lb, row_ub = buf.matrix()
    template = MiqpProblem(
        c=c, a_mat=a_mat, row_lb=row_lb, row_ub=row_ub,
        var_lb=var_lb, var_ub=var_ub,
    )
    shared_cols = n_local + np.arange(shared.size)
    return template, c.copy(), shared_cols


@dataclass
class AdmmResult:
    states: list
    iterations: int
    converged: bool
    residual_trace: list = field(default_factory=list)
    agent_costs: np.ndarray | None = None
    cost_trace: list = field(default_factory=list)
    solve_time: np.ndarray | None = None
    rho_trace: list = field(default_factory=list)

    @property
    def agent_ys(self):
        return [s.y for s in self.states]


def run_admm(agents, cfg: AdmmConfig) -> AdmmResult:
    """Synchronous rounds of (dual update, local solve, broadcast).

    Terminates once every agent's squared distance to its neighborhood
    average falls below cfg.epsilon AND every agent's squared step change
    does too, or flags the best iterate after max_iters.  The step-change
    test guards against transient exact-consensus points (symmetric
    instances pass through them every round while the multipliers are
    still moving).  With a two-stage penalty configured the stiffer value
    takes over once the residual first drops below the switch tolerance.
    """
    n = len(agents)
    graph = cfg.graph or CommGraph.complete(n - 1)
    if graph.n_agents != n:
        raise AdmmError("graph size does not match the agent list")
    nbrs = graph.neighbors
    size = agents[0].shared_size
    if any(a.shared_size != size for a in agents):
        raise AdmmError("agents disagree on the shared vector size")

    y0 = np.zeros(size)
    states = [
        AgentState(
            id=a.id, y=y0.copy(), y_hat=y0.copy(), lam=np.zeros(size),
            neighbor_y={m: y0.copy() for m in nbrs[a.id]},
        )
        for a in agents
    ]
    solve_time = np.zeros(n)
    solve_count = np.zeros(n, dtype=int)
    result = AdmmResult(states=states, iterations=0, converged=False)
    rho = cfg.rho
    switched = False

    for t in range(1, cfg.max_iters + 1):
        new_lam = [dual_update(states[j], rho) for j in range(n)]
        new_y = [None] * n
        costs = np.zeros(n)
        for j, agent in enumerate(agents):
            t0 = time.perf_counter()
            try:
                y_j, cost_j, sol = agent.solve(
                    new_lam[j], states[j].y_hat,
                    [states[j].neighbor_y[m] for m in nbrs[j]], rho,
                )
            except SubproblemInfeasible as exc:
                raise SubproblemInfeasible(
                    f"iteration {t}: {exc}"
                ) from exc
            solve_time[j] += time.perf_counter() - t0
            solve_count[j] += 1
            new_y[j] = y_j
            costs[j] = cost_j
            states[j].z = getattr(sol, "x", None)

        step_sq = np.array([
            float(np.sum((new_y[j] - states[j].y) ** 2)) for j in range(n)
        ])
        for j in range(n):
            states[j].lam = new_lam[j]
            states[j].y = new_y[j]
            states[j].y_hat = new_y[j].copy()
        for j in range(n):
            for m in nbrs[j]:
                states[j].neighbor_y[m] = new_y[m]

        residuals = np.array([
            float(np.sum((states[j].y - np.mean(
                [states[j].neighbor_y[m] for m in nbrs[j]], axis=0)) ** 2))
            for j in range(n)
        ])
        max_res = float(residuals.max())
        result.residual_trace.append(residuals)
        result.cost_trace.append(costs)
        result.rho_trace.append(rho)
        result.iterations = t
        result.agent_costs = costs

        if (not switched and cfg.rho_stage2 is not None
                and cfg.eps_switch is not None and max_res < cfg.eps_switch):
            rho = cfg.rho_stage2
            switched = True
        if max_res < cfg.epsilon and float(step_sq.max()) < cfg.epsilon:
            result.converged = True
            break

    result.solve_time = solve_time / np.maximum(solve_count, 1)
    return result


def error_a(centralized_obj: float, agent_costs) -> float:
    """Relative gap between the centralized optimum and the sum of the
    agents' cost-only objective parts."""
    if abs(centralized_obj) < 1e-300:
        raise ZeroDenominator("centralized objective is zero")
    total = float(np.sum(agent_costs))
    return abs(centralized_obj - total) / abs(centralized_obj)


def error_b(y_cent: np.ndarray, agent_ys, skip_below: float = 1e-6) -> float:
    """Mean absolute relative deviation of every agent copy from the
    centralized shared vector, skipping near-zero reference components."""
    y_cent = np.asarray(y_cent, dtype=float)
    keep = np.abs(y_cent) >= skip_below
    if not keep.any():
        raise AllComponentsSkipped("all reference components below threshold")
    total = 0.0
    for y_i in agent_ys:
        total += float(np.sum(
            np.abs(y_cent[keep] - np.asarray(y_i)[keep]) / np.abs(y_cent[keep])
        ))
    return total / (len(agent_ys) * int(keep.sum()))
