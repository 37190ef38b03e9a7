"""Command-line front end: run, validate, and benchmark cases.

Exit codes: 0 success, 1 usage error, 2 case validation failure,
3 numerical divergence / stiffness abort.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import __version__
from .caseio import (
    CaseError, CaseParseError, CaseValidationError, case_hash, load_case,
    write_timeseries,
)
from .reference import DivergenceError as RefDivergence, rk4_run, \
    trapezoidal_run, steady_state_residual
from .solver import (
    DivergenceError, SolverConfig, StiffnessAbortError, simulate,
)
from .system import build_system, initialize

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--case", required=True, help="case JSON path")
    p.add_argument("--t-end", type=float, default=None)
    p.add_argument("--order", type=int, default=None)
    p.add_argument("--eps-imbalance", type=float, default=None)
    p.add_argument("--dt-init", type=float, default=None)
    p.add_argument("--dt-min", type=float, default=None)
    p.add_argument("--dt-cap", type=float, default=None)
    p.add_argument("--dense-interval", type=float, default=None)
    p.add_argument("--output", default=None, help="CSV output path")
    p.add_argument("--seed-check", action="store_true",
                   help="verify the steady-state seed residual before running")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock in CSV metadata (breaks "
                        "byte-for-byte reproducibility)")


def _build_parser():
    ap = _Parser(prog="emtseries",
                 description="power-series state-space EMT simulator")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a case")
    _add_common(run)
    run.add_argument("--solver", choices=("sas", "rk4", "trap"),
                     default="sas")
    run.add_argument("--dt-fixed", type=float, default=1e-6,
                     help="fixed step for rk4/trap solvers")
    run.add_argument("--no-switch-detection", action="store_true")

    val = sub.add_parser("validate", help="validate a case file only")
    val.add_argument("--case", required=True)

    bo = sub.add_parser("bench-order",
                        help="sweep series order; report mean step and time")
    _add_common(bo)
    bo.add_argument("--orders", default="4,8,16,24,30,40",
                    help="comma-separated list of orders")

    bs = sub.add_parser("bench-solver",
                        help="series solver vs rk4/trapezoidal accuracy+cost")
    _add_common(bs)
    bs.add_argument("--dt-fixed", type=float, default=5e-5,
                    help="fixed step for the rk4/trap comparison runs")
    bs.add_argument("--oracle-dt", type=float, default=1e-6)
    bs.add_argument("--match-error", action="store_true",
                    help="search the rk4 step that matches the series error")
    return ap


def _cfg_overrides(args) -> dict:
    out = {}
    for attr, key in (("t_end", "t_end"), ("order", "order"),
                      ("eps_imbalance", "eps_imbalance"),
                      ("dt_init", "dt_init"), ("dt_min", "dt_min"),
                      ("dt_cap", "dt_cap"),
                      ("dense_interval", "dense_interval")):
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = v
    return out


def _metadata(case, cfg, solver_name, extra=None):
    md = {
        "tool": f"emtseries {__version__}",
        "case": case.name,
        "case_sha256": case_hash(case),
        "solver": solver_name,
        "order": cfg.order if solver_name == "sas" else "-",
        "eps_imbalance": cfg.eps_imbalance if solver_name == "sas" else "-",
        "dt_init": cfg.dt_init,
        "dt_min": cfg.dt_min,
        "dt_cap": cfg.dt_cap,
        "t_end": cfg.t_end,
    }
    if extra:
        md.update(extra)
    return md


def _seed_check(case) -> float:
    system = build_system(case, order=max(2, case.solver.order))
    snap = initialize(system)
    return steady_state_residual(system, snap)


def _cmd_run(args) -> int:
    case = load_case(args.case)
    cfg = SolverConfig.from_case(case, **_cfg_overrides(args))
    if args.no_switch_detection:
        cfg = SolverConfig.from_case(case, **_cfg_overrides(args),
                                     switch_detection=False)
    if args.seed_check:
        r = _seed_check(case)
        print(f"seed residual: {r:.3e}")
        if not r < 1e-8:
            print("seed check FAILED (residual >= 1e-8)")
            return EXIT_NUMERICAL
    t0 = time.perf_counter()
    if args.solver == "sas":
        result = simulate(case, cfg)
        traj = result.trajectory
        n_steps = len(result.records)
        mean_dt = result.mean_dt
        for te, msg in result.event_log:
            print(f"t={te:.9f}s  {msg}")
    else:
        runner = rk4_run if args.solver == "rk4" else trapezoidal_run
        traj = runner(case, args.dt_fixed, cfg.t_end,
                      save_interval=cfg.dense_interval or 1e-5)
        n_steps = int(round(cfg.t_end / args.dt_fixed))
        mean_dt = args.dt_fixed
    wall = time.perf_counter() - t0
    print(f"{args.solver}: {n_steps} steps, mean dt {mean_dt:.6e} s, "
          f"wall {wall:.3f} s")
    if args.output:
        extra = {"wall_clock_s": f"{wall:.3f}"} if args.timing else None
        md = _metadata(case, cfg, args.solver, extra)
        sel = cfg.record_states if args.solver == "sas" else "all"
        write_timeseries(traj, sel, args.output, md)
        print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    case = load_case(args.case)
    print(f"case {case.name!r}: {len(case.buses)} buses, "
          f"{len(case.branches)} branches, {len(case.machines)} machines, "
          f"{len(case.events)} events -- valid")
    return EXIT_OK


def _cmd_bench_order(args) -> int:
    case = load_case(args.case)
    try:
        orders = [int(x) for x in args.orders.split(",") if x.strip()]
    except ValueError as exc:
        raise _UsageError(f"bad --orders list: {exc}") from exc
    rows = []
    print(f"{'order':>6} {'steps':>8} {'mean dt (us)':>14} {'wall (s)':>10}")
    for n in orders:
        cfg = SolverConfig.from_case(case, order=n, **_cfg_overrides(args))
        t0 = time.perf_counter()
        result = simulate(case, cfg)
        wall = time.perf_counter() - t0
        rows.append((n, len(result.records), result.mean_dt, wall))
        print(f"{n:>6} {rows[-1][1]:>8} {rows[-1][2] * 1e6:>14.2f} "
              f"{wall:>10.3f}")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write("order,steps,mean_dt_s,wall_s\n")
            for n, steps, mdt, wall in rows:
                fh.write(f"{n},{steps},{mdt:.17g},{wall:.3f}\n")
    return EXIT_OK


def _grid_error(traj_a, traj_b, names, interval):
    ga, ra = traj_a.on_grid(interval)
    gb, rb = traj_b.on_grid(interval)
    common, ia, ib = np.intersect1d(ga, gb, return_indices=True)
    va = traj_a.columns(names)[ra[ia]]
    vb = traj_b.columns(names)[rb[ib]]
    d = np.abs(va - vb)
    return float(np.nanmax(d)), float(np.nanmean(d))


def _cmd_bench_solver(args) -> int:
    case = load_case(args.case)
    cfg = SolverConfig.from_case(case, **_cfg_overrides(args))
    grid = max(args.oracle_dt, 1e-5)
    buses = None
    print("running oracle rk4 ...")
    t0 = time.perf_counter()
    oracle = rk4_run(case, args.oracle_dt, cfg.t_end, save_interval=grid)
    w_or = time.perf_counter() - t0
    buses = oracle.bus_voltage_names()
    print(f"  oracle rk4 dt={args.oracle_dt:g}: wall {w_or:.2f} s")
    cfg_sas = SolverConfig.from_case(case, dense_interval=grid,
                                     **_cfg_overrides(args))
    t0 = time.perf_counter()
    sas = simulate(case, cfg_sas)
    w_sas = time.perf_counter() - t0
    e_sas = _grid_error(sas.trajectory, oracle, buses, grid)
    print(f"{'solver':>8} {'step (us)':>12} {'wall (s)':>9} "
          f"{'max err (pu)':>13} {'mean err (pu)':>14}")
    print(f"{'sas':>8} {sas.mean_dt * 1e6:>12.2f} {w_sas:>9.3f} "
          f"{e_sas[0]:>13.3e} {e_sas[1]:>14.3e}")
    results = {"sas": (sas.mean_dt, w_sas, e_sas)}
    for name, runner in (("rk4", rk4_run), ("trap", trapezoidal_run)):
        t0 = time.perf_counter()
        traj = runner(case, args.dt_fixed, cfg.t_end, save_interval=grid)
        wall = time.perf_counter() - t0
        err = _grid_error(traj, oracle, buses, grid)
        results[name] = (args.dt_fixed, wall, err)
        print(f"{name:>8} {args.dt_fixed * 1e6:>12.2f} {wall:>9.3f} "
              f"{err[0]:>13.3e} {err[1]:>14.3e}")
    if args.match_error:
        target = max(e_sas[0], 1e-12)
        dt_match = None
        for dt_try in (2e-6, 5e-6, 1e-5, 2e-5, 5e-5, 1e-4, 2e-4):
            traj = rk4_run(case, dt_try, cfg.t_end, save_interval=grid)
            err = _grid_error(traj, oracle, buses, grid)[0]
            if err <= target:
                dt_match = dt_try
            else:
                break
        if dt_match:
            print(f"error-matched rk4 step: {dt_match:g} s "
                  f"(series mean step {sas.mean_dt:g} s, "
                  f"ratio {sas.mean_dt / dt_match:.1f}x)")
        else:
            print("no rk4 step in the scan matched the series error")
    return EXIT_OK


def run_cli(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        if args.command == "bench-order":
            return _cmd_bench_order(args)
        if args.command == "bench-solver":
            return _cmd_bench_solver(args)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CaseParseError, CaseValidationError, CaseError) as exc:
        print(f"case error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, StiffnessAbortError, RefDivergence) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
