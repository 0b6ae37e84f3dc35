"""Command-line entry points.

Subcommands: run (receding-horizon simulation), verify-as (tariff
reformulation equivalence check), sweep (penalty/tolerance grid), and
compare (one-stage centralized vs distributed).  Exit status is nonzero
when a validity gate fails.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .admm import AdmmConfig
from .harness import compare_modes, emit_plots, run_mpc, sweep_rho, sweep_table
from .network import load_network
from .scenario import load_scenario
from .voltage_support import AsParameters, verify_reformulation


def _add_common(p):
    p.add_argument("--network", required=True, help="network document path")
    p.add_argument("--scenario", required=True, help="scenario config path")


def _admm_cfg(scn, rho=None, eps=None):
    a = scn.admm
    return AdmmConfig(
        rho=rho if rho is not None else a.rho,
        epsilon=eps if eps is not None else a.epsilon,
        max_iters=a.max_iters,
        rho_stage2=a.rho_stage2,
        eps_switch=a.eps_switch,
    )


def cmd_run(args) -> int:
    net = load_network(args.network)
    scn = load_scenario(args.scenario, net)
    horizon = args.np if args.np else scn.horizon
    vs = not args.no_voltage_support

    def progress(rec):
        print(
            f"t={rec.t:3d} pex={rec.p_ex:7.3f} qex={rec.q_ex:7.3f} "
            f"zone={rec.zone} penalty={rec.penalty_model:9.4f} "
            f"wall={rec.wall:5.1f}s",
            flush=True,
        )

    report = run_mpc(
        net, scn.mg_specs, scn.timeline,
        mode="distributed" if args.mode == "distributed" else "centralized",
        horizon=horizon, as_params=scn.as_params, limits=scn.limits,
        slack_v=scn.slack_v, voltage_support=vs, options=scn.solver,
        admm=_admm_cfg(scn), intervals=args.intervals,
        dump_lp=args.dump_lp, progress=progress if args.verbose else None,
    )
    totals = report.totals
    print("totals:")
    for k, v in totals.items():
        print(f"  {k:18s} {v:.4f}")
    print("gates:")
    ok = True
    for k, v in report.gates.items():
        print(f"  {k:24s} {'pass' if v else 'FAIL'}")
        ok &= bool(v)
    if args.out:
        paths = emit_plots(report, args.out, timeline=scn.timeline,
                           as_params=scn.as_params)
        print("wrote:", ", ".join(sorted(paths)))
    return 0 if ok else 1


def cmd_verify_as(args) -> int:
    if args.scenario and args.network:
        net = load_network(args.network)
        scn = load_scenario(args.scenario, net)
        params = scn.as_params
        if params is None:
            print("scenario has no [ancillary] section", file=sys.stderr)
            return 2
    else:
        params = AsParameters(p_min=1.0, q_min=0.33, tan_phi=0.3287,
                              c_p=5.0, m_p=72.0)
    n = args.grid
    grid = [
        (p, q)
        for p in np.linspace(-2.0, 3.0, n)
        for q in np.linspace(-2.0, 2.0, n)
    ]
    dev = verify_reformulation(params, grid)
    print(f"grid {n}x{n}: max |tariff-block cost - oracle cost| = {dev:.3e}")
    ok = dev < 1e-6
    print("gate:", "pass" if ok else "FAIL")
    return 0 if ok else 1


def cmd_sweep(args) -> int:
    net = load_network(args.network)
    scn = load_scenario(args.scenario, net)
    rhos = [float(tok) for tok in args.rhos.split(",")]
    eps = [float(tok) for tok in args.eps.split(",")]
    rows = sweep_rho(
        net, scn.mg_specs, scn.timeline, stage=args.stage,
        horizon=args.np if args.np else scn.horizon,
        rhos=rhos, epsilons=eps, as_params=scn.as_params,
        limits=scn.limits, slack_v=scn.slack_v, options=scn.solver,
        max_iters=scn.admm.max_iters,
    )
    table = sweep_table(rows)
    print(table, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "sweep.dat")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(table)
        print(f"wrote {path}")
    return 0


def cmd_compare(args) -> int:
    net = load_network(args.network)
    scn = load_scenario(args.scenario, net)
    out = compare_modes(
        net, scn.mg_specs, scn.timeline, stage=args.stage,
        horizon=args.np if args.np else scn.horizon,
        as_params=scn.as_params, limits=scn.limits, slack_v=scn.slack_v,
        options=scn.solver, admm=_admm_cfg(scn, args.rho, args.eps),
    )
    print(f"centralized objective: {out.centralized_obj:.6f}")
    print(f"iterations: {out.iterations} converged: {out.converged}")
    print(f"final error_a: {out.error_a_trace[-1]:.3e}")
    print(f"error_b: {out.error_b:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "error_a_trace.dat")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# iteration error_a\n")
            for i, ea in enumerate(out.error_a_trace):
                fh.write(f"{i + 1} {ea:.6e}\n")
        print(f"wrote {path}")
    return 0 if out.converged else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mgcoord",
        description="coordinated microgrid scheduling on a radial feeder",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="receding-horizon simulation")
    _add_common(p)
    p.add_argument("--mode", choices=("central", "distributed"),
                   default="central")
    p.add_argument("--no-voltage-support", action="store_true")
    p.add_argument("--np", type=int, default=None, help="horizon override")
    p.add_argument("--intervals", type=int, default=None)
    p.add_argument("--out", default=None, help="plot-data directory")
    p.add_argument("--dump-lp", default=None, help="write stage problems")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify-as", help="tariff reformulation equivalence")
    p.add_argument("--network", default=None)
    p.add_argument("--scenario", default=None)
    p.add_argument("--grid", type=int, default=100)
    p.set_defaults(func=cmd_verify_as)

    p = sub.add_parser("sweep", help="penalty/tolerance sweep on one stage")
    _add_common(p)
    p.add_argument("--rhos", default="60,160,500")
    p.add_argument("--eps", default="1e-2,1e-4")
    p.add_argument("--stage", type=int, default=76)
    p.add_argument("--np", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="centralized vs distributed, one stage")
    _add_common(p)
    p.add_argument("--stage", type=int, default=76)
    p.add_argument("--np", type=int, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
