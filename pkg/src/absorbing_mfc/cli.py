"""Command-line front end.

Exit codes: 0 success, 1 usage or config error, 2 assertion failure
(a checked property does not hold), 3 solver failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .barrier import build_barrier, differential_residuals
from .errors import CFLError, SchemeFailureError, SolverDivergenceError
from .fp import DriftField, l2_energy_residual, solve_fp
from .geometry import EmpiricalConfig, GridDensity, SpaceGrid, TimeGrid
from .harness import (
    atomic_write_text,
    build_model,
    fmt,
    load_config,
    run_convergence,
    run_estimate_tables,
    write_convergence_report,
    write_csv,
)
from .hierarchy import (
    check_crude_bound,
    check_gradient_scaling,
    solve_hierarchy,
    write_level_dump,
)
from .metric import metric_d_rho_empirical
from .mfc import solve_mfc


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed override")


def build_parser() -> _Parser:
    parser = _Parser(prog="absorbing-mfc",
                     description="mean-field control with boundary absorption")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("solve-hierarchy", "solve-mfc", "fp-run", "converge", "tables"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "fp-run":
            p.add_argument("--alpha", type=float, default=0.0,
                           help="constant drift value")

    p = sub.add_parser("barrier-check")
    _add_common(p)
    p.add_argument("--constant", type=float, default=2.0)
    p.add_argument("--nx", type=int, default=256)

    p = sub.add_parser("metric")
    p.add_argument("--a", required=True, metavar="atoms:X,Y,...")
    p.add_argument("--b", required=True, metavar="atoms:X,Y,...")
    p.add_argument("--denom", type=int, required=True)
    return parser


def _parse_atoms(spec: str, denom: int) -> EmpiricalConfig:
    if not spec.startswith("atoms:"):
        raise _UsageError(f"expected atoms:x1,x2,... got {spec!r}")
    body = spec[len("atoms:"):]
    pts = np.array([float(v) for v in body.split(",") if v != ""])
    return EmpiricalConfig(denom, pts)


def _sine_density(grid: SpaceGrid) -> GridDensity:
    return GridDensity.from_function(grid, lambda x: np.sin(np.pi * x))


def _cmd_metric(args) -> int:
    a = _parse_atoms(args.a, args.denom)
    b = _parse_atoms(args.b, args.denom)
    print(f"{metric_d_rho_empirical(a, b):g}")
    return 0


def _cmd_fp_run(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, args.out)
    grid = SpaceGrid(cfg.nx)
    tg = TimeGrid(0.0, cfg.t_horizon, cfg.nt)
    drift = DriftField.constant(grid, tg, args.alpha)
    path = solve_fp(_sine_density(grid), drift, tg)
    residual = l2_energy_residual(path, drift)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = [[k, path.masses[k], grid.dx * np.sum(path.values[k, 1:-1] ** 2),
             grid.dx, tg.dt] for k in range(tg.nt + 1)]
    write_csv(os.path.join(cfg.out_dir, "fp_path.csv"),
              ["step", "mass", "l2_norm_sq", "dx", "dt"], rows)
    atomic_write_text(os.path.join(cfg.out_dir, "fp_energy_residual.txt"),
                      fmt(residual) + "\n")
    print(f"fp-run: final mass {path.masses[-1]:.6f}, "
          f"energy residual {residual:.3e}")
    return 0


def _cmd_solve_hierarchy(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, args.out)
    model = build_model(cfg)
    grid = SpaceGrid(cfg.nx)
    tg = TimeGrid(0.0, cfg.t_horizon, cfg.nt)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows = []
    for n in cfg.n_list:
        sol = solve_hierarchy(n, model, grid, tg, cfg.r_trunc)
        for k in range(n + 1):
            write_level_dump(
                os.path.join(cfg.out_dir, f"hierarchy_n{n}_k{k}.bin"), sol, k
            )
        rows.append([n, check_crude_bound(sol), check_gradient_scaling(sol),
                     sol.grad_sup, grid.dx, tg.dt])
        print(f"solve-hierarchy: N={n} done (sup |N DV| = {sol.grad_sup:.3f})")
    write_csv(os.path.join(cfg.out_dir, "hierarchy_summary.csv"),
              ["n", "crude_constant", "gradient_constant", "grad_sup", "dx", "dt"],
              rows)
    return 0


def _cmd_solve_mfc(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, args.out)
    model = build_model(cfg)
    grid = SpaceGrid(cfg.nx)
    tg = TimeGrid(0.0, cfg.t_horizon, cfg.nt)
    sol = solve_mfc(0.0, _sine_density(grid), model, tg, cfg.r_trunc,
                    tol=cfg.mfc_tol, max_iter=cfg.mfc_max_iter)
    os.makedirs(cfg.out_dir, exist_ok=True)
    hist = [[i, r, c] for i, (r, c) in
            enumerate(zip(sol.residual_history, sol.cost_history))]
    write_csv(os.path.join(cfg.out_dir, "mfc_history.csv"),
              ["iter", "residual", "cost"], hist)
    np.save(os.path.join(cfg.out_dir, "mfc_u.npy"), sol.u_path)
    np.save(os.path.join(cfg.out_dir, "mfc_m.npy"), sol.m_path.values)
    np.save(os.path.join(cfg.out_dir, "mfc_alpha.npy"), sol.alpha_path.values)
    print(f"solve-mfc: U={sol.value:.6f} after {sol.iterations} iterations "
          f"(residual {sol.residual:.2e}, converged={sol.converged})")
    return 0 if sol.converged else 2


def _cmd_barrier_check(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, args.out)
    grid = SpaceGrid(args.nx)
    bp = build_barrier(args.constant, grid)
    res = differential_residuals(bp)
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_csv(os.path.join(cfg.out_dir, "barrier_residuals.csv"),
              ["node", "residual"],
              [[i, v] for i, v in enumerate(res)])
    worst = float(res.max()) if res.size else 0.0
    print(f"barrier-check: C={args.constant} eps={bp.epsilon:.4f} "
          f"slope={bp.slope:.2f} worst residual {worst:.3e}")
    return 0 if worst <= 0.0 else 2


def _cmd_converge(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, args.out)
    report = run_convergence(cfg)
    paths = write_convergence_report(report, cfg.out_dir)
    print("converge: " + ", ".join(
        f"e({n})={e:.5f}" for n, e in zip(report.n_values, report.errors)))
    print(f"converge: wrote {', '.join(paths)}")
    return 0 if (report.trend_ok and report.strict_decrease_ok) else 2


def _cmd_tables(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed, args.out)
    result = run_estimate_tables(cfg, cfg.out_dir)
    print(f"tables: wrote {result['crude']}, {result['gradient']}, "
          f"{result['modulus']}")
    return 0 if result["uniform_ok"] else 2


_COMMANDS = {
    "metric": _cmd_metric,
    "fp-run": _cmd_fp_run,
    "solve-hierarchy": _cmd_solve_hierarchy,
    "solve-mfc": _cmd_solve_mfc,
    "barrier-check": _cmd_barrier_check,
    "converge": _cmd_converge,
    "tables": _cmd_tables,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        if isinstance(exc, CFLError):
            print(f"solver failure: {exc}", file=sys.stderr)
            return 3
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SolverDivergenceError, SchemeFailureError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
