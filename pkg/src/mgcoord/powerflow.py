"""Branch-flow (DistFlow) relations, current linearization, and an exact
Newton-Raphson load-flow used to validate optimizer output.

Conventions: line flows (p_flow, q_flow) are measured at the receiving end
of each line, v_sq holds squared voltage magnitudes per bus, i_sq squared
current magnitudes per line.  For a line into bus b with ancestor a:

    v_sq[a] = v_sq[b] + 2(r p + x q) + (r^2 + x^2) i
    i       = (p^2 + q^2) / v_sq[b]

and the bus balances sum child sending-end flows (receiving-end + loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import RadialNetwork


class PowerFlowError(ValueError):
    pass


class DimensionMismatch(PowerFlowError):
    pass


class ZeroVoltage(PowerFlowError):
    pass


class NoConvergence(PowerFlowError):
    pass


class SingularJacobian(PowerFlowError):
    pass


# Linearization denominators below this squared-voltage floor indicate
# corrupt data rather than an operating point.
V_SQ_FLOOR = 0.25


@dataclass
class DistFlowState:
    """One interval of branch-flow quantities."""

    p_flow: np.ndarray
    q_flow: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    v_sq: np.ndarray
    i_sq: np.ndarray

    def check_dims(self, net: RadialNetwork):
        nl, nb = net.n_line, net.n_bus
        shapes = (
            (self.p_flow, nl), (self.q_flow, nl), (self.p_inj, nb),
            (self.q_inj, nb), (self.v_sq, nb), (self.i_sq, nl),
        )
        for arr, want in shapes:
            if np.shape(arr) != (want,):
                raise DimensionMismatch(
                    f"expected length {want}, got {np.shape(arr)}"
                )
        if not (np.asarray(self.v_sq) > 0).all():
            raise PowerFlowError("v_sq must be positive at all buses")


@dataclass(frozen=True)
class LinearizationPoint:
    """Per-line expansion point for the squared-current Taylor model."""

    p_star: np.ndarray
    q_star: np.ndarray
    v_sq_star: np.ndarray
    i_sq_star: np.ndarray

    def __post_init__(self):
        p, q, v, i = (
            np.atleast_1d(np.asarray(a, dtype=float))
            for a in (self.p_star, self.q_star, self.v_sq_star, self.i_sq_star)
        )
        if not p.shape == q.shape == v.shape == i.shape:
            raise DimensionMismatch("linearization point arrays must align")
        implied = (p**2 + q**2) / v
        if not np.allclose(i, implied, rtol=1e-9, atol=1e-9):
            raise PowerFlowError("i_sq_star inconsistent with (p,q,v) point")
        for name, a in (("p_star", p), ("q_star", q), ("v_sq_star", v), ("i_sq_star", i)):
            object.__setattr__(self, name, a)

    @classmethod
    def from_point(cls, p_star, q_star, v_sq_star) -> "LinearizationPoint":
        p = np.atleast_1d(np.asarray(p_star, dtype=float))
        q = np.atleast_1d(np.asarray(q_star, dtype=float))
        v = np.atleast_1d(np.asarray(v_sq_star, dtype=float))
        return cls(p, q, v, (p**2 + q**2) / v)

    @classmethod
    def from_state(cls, net: RadialNetwork, s: DistFlowState) -> "LinearizationPoint":
        v_recv = np.asarray(s.v_sq)[net.line_to_bus]
        return cls.from_point(s.p_flow, s.q_flow, v_recv)

    @classmethod
    def flat(cls, n_line: int, v_sq: float = 1.0) -> "LinearizationPoint":
        z = np.zeros(n_line)
        return cls.from_point(z, z.copy(), np.full(n_line, v_sq))


def linearize_current(lp: LinearizationPoint):
    """First-order model of i_sq around lp.

    Returns per-line coefficient arrays (on p_flow, q_flow, v_sq of the
    receiving bus) plus a constant, such that the affine form reproduces
    i_sq_star exactly at the expansion point.
    """
    v = lp.v_sq_star
    if (v <= V_SQ_FLOOR).any():
        bad = np.flatnonzero(v <= V_SQ_FLOOR)
        raise ZeroVoltage(f"v_sq_star <= {V_SQ_FLOOR} on lines {bad.tolist()}")
    coef_p = 2.0 * lp.p_star / v
    coef_q = 2.0 * lp.q_star / v
    coef_v = -(lp.p_star**2 + lp.q_star**2) / v**2
    const = lp.i_sq_star - coef_p * lp.p_star - coef_q * lp.q_star - coef_v * v
    return coef_p, coef_q, coef_v, const


def distflow_residuals(net: RadialNetwork, s: DistFlowState):
    """Residuals of the exact branch-flow equations for one interval.

    Returns a dict with keys: "p_balance", "q_balance" (per bus),
    "voltage_drop", "current" (per line).  All-zero residuals certify an
    exact solution, including the nonconvex current equation.
    """
    s.check_dims(net)
    p, q = np.asarray(s.p_flow), np.asarray(s.q_flow)
    i_sq, v_sq = np.asarray(s.i_sq), np.asarray(s.v_sq)

    # Sending-end flow of each line, accumulated at its from-bus.
    send_p = np.zeros(net.n_bus)
    send_q = np.zeros(net.n_bus)
    np.add.at(send_p, net.line_from_bus, p + i_sq * net.r)
    np.add.at(send_q, net.line_from_bus, q + i_sq * net.x)

    recv_p = np.zeros(net.n_bus)
    recv_q = np.zeros(net.n_bus)
    recv_p[net.line_to_bus] = p
    recv_q[net.line_to_bus] = q

    res_p = send_p - np.asarray(s.p_inj) - recv_p
    res_q = send_q - np.asarray(s.q_inj) - recv_q

    v_from = v_sq[net.line_from_bus]
    v_to = v_sq[net.line_to_bus]
    res_v = v_from - v_to - 2.0 * (net.r * p + net.x * q) - (net.r**2 + net.x**2) * i_sq
    res_i = (p**2 + q**2) / v_to - i_sq

    return {
        "p_balance": res_p,
        "q_balance": res_q,
        "voltage_drop": res_v,
        "current": res_i,
    }


@dataclass
class LoadflowResult:
    v_mag: np.ndarray
    v_ang: np.ndarray
    iterations: int
    mismatch_trace: list

    @property
    def v(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def _ybus(net: RadialNetwork) -> np.ndarray:
    y = np.zeros((net.n_bus, net.n_bus), dtype=complex)
    for k in range(net.n_line):
        f, t = net.line_from_bus[k], net.line_to_bus[k]
        yl = 1.0 / (net.r[k] + 1j * net.x[k])
        y[f, f] += yl
        y[t, t] += yl
        y[f, t] -= yl
        y[t, f] -= yl
    return y


def newton_raphson_loadflow(
    net: RadialNetwork,
    injections: np.ndarray,
    slack_v: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 50,
) -> LoadflowResult:
    """Full AC load flow with the root as slack bus.

    injections is a complex per-bus array (per-unit, generation positive);
    the root entry is ignored.  Converges when the power mismatch at every
    non-root bus is below tol in infinity norm.
    """
    if slack_v <= 0:
        raise PowerFlowError("slack voltage must be positive")
    s_spec = np.asarray(injections, dtype=complex)
    if s_spec.shape != (net.n_bus,):
        raise DimensionMismatch(f"injections must have length {net.n_bus}")

    y = _ybus(net)
    pq = np.array([b for b in range(net.n_bus) if b != net.root], dtype=int)

    vm = np.full(net.n_bus, float(slack_v))
    va = np.zeros(net.n_bus)
    trace = []
    for it in range(1, max_iter + 1):
        v = vm * np.exp(1j * va)
        i_bus = y @ v
        mis = v * np.conj(i_bus) - s_spec
        f = np.concatenate([mis[pq].real, mis[pq].imag])
        norm = float(np.abs(f).max()) if f.size else 0.0
        trace.append(norm)
        if norm < tol:
            return LoadflowResult(vm, va, it, trace)

        dv = np.diag(v)
        dvn = np.diag(v / vm)
        ds_dva = 1j * dv @ np.conj(np.diag(i_bus) - y @ dv)
        ds_dvm = dvn @ np.conj(np.diag(i_bus)) + dv @ np.conj(y @ dvn)

        j11 = ds_dva[np.ix_(pq, pq)].real
        j12 = ds_dvm[np.ix_(pq, pq)].real
        j21 = ds_dva[np.ix_(pq, pq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            step = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(str(exc)) from exc
        n = pq.size
        va[pq] -= step[:n]
        vm[pq] -= step[n:]

    raise NoConvergence(f"no convergence after {max_iter} iterations (|f|={norm:.3e})")


def state_from_loadflow(
    net: RadialNetwork, result: LoadflowResult, injections: np.ndarray
) -> DistFlowState:
    """Assemble a DistFlowState from an AC load-flow solution."""
    v = result.v
    p_flow = np.zeros(net.n_line)
    q_flow = np.zeros(net.n_line)
    i_sq = np.zeros(net.n_line)
    for k in range(net.n_line):
        f, t = net.line_from_bus[k], net.line_to_bus[k]
        i_line = (v[f] - v[t]) / (net.r[k] + 1j * net.x[k])
        s_recv = v[t] * np.conj(i_line)
        p_flow[k] = s_recv.real
        q_flow[k] = s_recv.imag
        i_sq[k] = abs(i_line) ** 2

    s_inj = np.asarray(injections, dtype=complex).copy()
    # The slack bus supplies whatever balances the network.
    i_bus = _ybus(net) @ v
    s_inj[net.root] = (v * np.conj(i_bus))[net.root]
    return DistFlowState(
        p_flow=p_flow,
        q_flow=q_flow,
        p_inj=s_inj.real.copy(),
        q_inj=s_inj.imag.copy(),
        v_sq=np.abs(v) ** 2,
        i_sq=i_sq,
    )


@dataclass(frozen=True)
class OperatingLimits:
    """Square inner approximation of line limits plus voltage band."""

    p_max: np.ndarray
    q_max: np.ndarray
    v_min_sq: float
    v_max_sq: float

    def __post_init__(self):
        if not self.v_min_sq < self.v_max_sq:
            raise PowerFlowError("voltage band is empty")

    @classmethod
    def from_network(
        cls, net: RadialNetwork, v_min: float = 0.95, v_max: float = 1.05
    ) -> "OperatingLimits":
        pm = net.s_max / np.sqrt(2.0)
        return cls(p_max=pm, q_max=pm.copy(), v_min_sq=v_min**2, v_max_sq=v_max**2)


@dataclass(frozen=True)
class Violation:
    kind: str  # "p_flow" | "q_flow" | "v_low" | "v_high"
    index: int
    value: float
    bound: float


def check_limits(s: DistFlowState, lim: OperatingLimits, skip_bus=()) -> list[Violation]:
    """List every line/bus outside the operating limits (empty = feasible).

    skip_bus excludes buses (e.g. the slack) from the voltage band check.
    """
    p = np.asarray(s.p_flow)
    q = np.asarray(s.q_flow)
    if p.shape != lim.p_max.shape or q.shape != lim.q_max.shape:
        raise DimensionMismatch("flow/limit dimensions differ")
    out: list[Violation] = []
    for k in np.flatnonzero(np.abs(p) > lim.p_max):
        out.append(Violation("p_flow", int(k), float(p[k]), float(lim.p_max[k])))
    for k in np.flatnonzero(np.abs(q) > lim.q_max):
        out.append(Violation("q_flow", int(k), float(q[k]), float(lim.q_max[k])))
    v = np.asarray(s.v_sq)
    skip = set(int(b) for b in skip_bus)
    for b in np.flatnonzero(v < lim.v_min_sq):
        if int(b) not in skip:
            out.append(Violation("v_low", int(b), float(v[b]), lim.v_min_sq))
    for b in np.flatnonzero(v > lim.v_max_sq):
        if int(b) not in skip:
            out.append(Violation("v_high", int(b), float(v[b]), lim.v_max_sq))
    return out


def violations_to_records(violations: list[Violation]) -> str:
    """Flat text serialization of a violation report."""
    lines = ["# kind index value bound"]
    for v in violations:
        lines.append(f"{v.kind} {v.index} {v.value:.10g} {v.bound:.10g}")
    return "\n".join(lines) + "\n"
