"""Experiment orchestration: the convergence study and the estimate tables.

Configuration is TOML with sections [model], [grid], [hierarchy], [mfc],
[mc], [output]; every run is a pure function of (config, seed): sampling
uses seeded low-discrepancy sequences, workers gather by index, outputs are
written atomically, and no timing information enters the output bytes (wall
time goes to the in-memory report and the log line only).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import os
import sys
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import qmc

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .geometry import EmpiricalConfig, SpaceGrid, TimeGrid
from .hierarchy import (
    HierarchySolution,
    check_crude_bound,
    check_gradient_scaling,
    eval_value,
    solve_hierarchy,
)
from .metric import compare_metrics, embed_empirical, metric_d_fast, mollify_empirical
from .mfc import solve_mfc
from .model import ModelSpec, quadratic_model, zero_cost_model

DEFAULTS: dict = {
    "model": {
        "id": "quadratic",
        "c_f": 0.5,
        "c_g": 0.5,
        "t_horizon": 0.5,
        "run_offset": 0.0,
        "term_offset": 0.0,
    },
    "grid": {"nx": 24, "nt": 400},
    "hierarchy": {"n_list": [1, 2, 3], "r_trunc": 5.0, "samples": 200},
    "mfc": {"tol": 1e-4, "max_iter": 200, "kappa_factor": 4.0},
    "mc": {"nsim": 100000, "seed": 7, "bridge": False, "dt_factor": 4},
    "output": {"dir": "out", "workers": 1},
}


@dataclass(frozen=True)
class ExperimentConfig:
    model_id: str
    c_f: float
    c_g: float
    t_horizon: float
    run_offset: float
    term_offset: float
    nx: int
    nt: int
    n_list: tuple
    r_trunc: float
    samples: int
    mfc_tol: float
    mfc_max_iter: int
    kappa_factor: float
    nsim: int
    seed: int
    bridge: bool
    dt_factor: int
    out_dir: str
    workers: int

    def __post_init__(self):
        if any(n > 4 for n in self.n_list):
            raise ValueError(f"N entries must be <= 4, got {self.n_list}")
        for name in ("t_horizon", "nx", "nt", "r_trunc", "samples", "mfc_tol",
                     "mfc_max_iter", "kappa_factor", "nsim", "dt_factor", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")


def _merge(base: dict, extra: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for sec, vals in extra.items():
        if sec not in out:
            raise ValueError(f"unknown config section [{sec}]")
        for key, val in vals.items():
            if key not in out[sec]:
                raise ValueError(f"unknown config key {sec}.{key}")
            out[sec][key] = val
    return out


def parse_override(item: str) -> tuple[str, str, object]:
    """--set key=value with dotted section.key; value parsed as a TOML literal."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form section.key=value")
    key, _, raw = item.partition("=")
    if "." not in key:
        raise ValueError(f"override key {key!r} needs a section prefix")
    sec, _, name = key.partition(".")
    try:
        val = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        val = raw  # bare strings allowed
    return sec.strip(), name.strip(), val


def load_config(
    path: str | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
    out_dir: str | None = None,
) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    merged = _merge(DEFAULTS, raw)
    for item in overrides or []:
        sec, key, val = parse_override(item)
        merged = _merge(merged, {sec: {key: val}})
    if seed is not None:
        merged["mc"]["seed"] = int(seed)
    if out_dir is not None:
        merged["output"]["dir"] = out_dir
    return ExperimentConfig(
        model_id=str(merged["model"]["id"]),
        c_f=float(merged["model"]["c_f"]),
        c_g=float(merged["model"]["c_g"]),
        t_horizon=float(merged["model"]["t_horizon"]),
        run_offset=float(merged["model"]["run_offset"]),
        term_offset=float(merged["model"]["term_offset"]),
        nx=int(merged["grid"]["nx"]),
        nt=int(merged["grid"]["nt"]),
        n_list=tuple(int(n) for n in merged["hierarchy"]["n_list"]),
        r_trunc=float(merged["hierarchy"]["r_trunc"]),
        samples=int(merged["hierarchy"]["samples"]),
        mfc_tol=float(merged["mfc"]["tol"]),
        mfc_max_iter=int(merged["mfc"]["max_iter"]),
        kappa_factor=float(merged["mfc"]["kappa_factor"]),
        nsim=int(merged["mc"]["nsim"]),
        seed=int(merged["mc"]["seed"]),
        bridge=bool(merged["mc"]["bridge"]),
        dt_factor=int(merged["mc"]["dt_factor"]),
        out_dir=str(merged["output"]["dir"]),
        workers=int(merged["output"]["workers"]),
    )


def build_model(cfg: ExperimentConfig) -> ModelSpec:
    if cfg.model_id == "quadratic":
        return quadratic_model(
            c_f=cfg.c_f,
            c_g=cfg.c_g,
            horizon=cfg.t_horizon,
            run_offset=cfg.run_offset,
            term_offset=cfg.term_offset,
        )
    if cfg.model_id == "zero":
        return zero_cost_model(horizon=cfg.t_horizon)
    raise ValueError(f"unknown model id {cfg.model_id!r}")


def atomic_write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def fmt(x) -> str:
    """Stable float formatting for CSV bytes (shortest round-trip repr)."""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceReport:
    """Per-N sup errors plus their tolerance decomposition."""

    n_values: list
    errors: list                    # e(N)
    kappa: float                    # mollification slack of the U side
    mfc_tol: float
    dx: float
    dt: float
    samples_per_n: int
    trend_ok: bool
    strict_decrease_ok: bool
    wall_times: list = field(default_factory=list)
    sample_rows: list = field(default_factory=list)


def _sample_triples(cfg: ExperimentConfig, n: int) -> list:
    """Quasi-uniform (K, t-index, x) triples, >= cfg.samples of them per N."""
    per_k = -(-cfg.samples // n)  # ceil
    triples = []
    for k in range(1, n + 1):
        sampler = qmc.Halton(d=k + 1, scramble=True,
                             seed=cfg.seed + 1009 * n + 31 * k)
        pts = sampler.random(per_k)
        for row in pts:
            t_idx = min(int(row[0] * cfg.nt), cfg.nt - 1)
            x = np.clip(row[1:], 1e-3, 1.0 - 1e-3)
            triples.append((k, t_idx, tuple(float(v) for v in x)))
    return triples


@lru_cache(maxsize=4)
def _worker_state(cfg_key: tuple):
    cfg = ExperimentConfig(*cfg_key)
    model = build_model(cfg)
    grid = SpaceGrid(cfg.nx)
    return cfg, model, grid


def _limit_value_task(args):
    """U(t, mollified empirical) for one sampled triple; runs in any process."""
    cfg_key, n, t_idx, x = args
    cfg, model, grid = _worker_state(cfg_key)
    tg = TimeGrid(0.0, cfg.t_horizon, cfg.nt)
    kappa = cfg.kappa_factor * grid.dx
    config = EmpiricalConfig(n, np.asarray(x))
    m0 = mollify_empirical(config, kappa, grid)
    t = tg.nodes[t_idx]
    sub = TimeGrid(t, cfg.t_horizon, cfg.nt - t_idx)
    res = solve_mfc(t, m0, model, sub, cfg.r_trunc,
                    tol=cfg.mfc_tol, max_iter=cfg.mfc_max_iter)
    return res.value


def run_convergence(cfg: ExperimentConfig, log=sys.stderr) -> ConvergenceReport:
    """Solve the hierarchy per N and probe sup |U - V^{N,K}| on sampled triples."""
    model = build_model(cfg)
    grid = SpaceGrid(cfg.nx)
    tg = TimeGrid(0.0, cfg.t_horizon, cfg.nt)
    cfg_key = dataclasses.astuple(cfg)
    kappa = cfg.kappa_factor * grid.dx

    errors = []
    wall_times = []
    sample_rows = []
    for n in cfg.n_list:
        start = time.perf_counter()
        sol = solve_hierarchy(n, model, grid, tg, cfg.r_trunc)
        triples = _sample_triples(cfg, n)
        tasks = [(cfg_key, n, t_idx, x) for (_k, t_idx, x) in triples]

        if cfg.workers > 1:
            with concurrent.futures.ProcessPoolExecutor(cfg.workers) as pool:
                u_vals = list(pool.map(_limit_value_task, tasks, chunksize=4))
        else:
            u_vals = [_limit_value_task(t) for t in tasks]

        worst = 0.0
        for (k, t_idx, x), u_val in zip(triples, u_vals):
            v_val = eval_value(sol, k, tg.nodes[t_idx], np.asarray(x))
            err = abs(u_val - v_val)
            worst = max(worst, err)
            sample_rows.append(
                [n, k, tg.nodes[t_idx], ";".join(fmt(v) for v in x),
                 u_val, v_val, err, kappa, cfg.mfc_tol]
            )
        errors.append(worst)
        elapsed = time.perf_counter() - start
        wall_times.append(elapsed)
        print(f"[converge] N={n}: e(N)={worst:.6f} over {len(triples)} samples "
              f"({elapsed:.1f}s)", file=log)

    trend_ok = all(
        errors[i + 1] <= 1.10 * errors[i] + 1e-15 for i in range(len(errors) - 1)
    )
    strict = errors[-1] < errors[0] or errors[0] == 0.0
    return ConvergenceReport(
        n_values=list(cfg.n_list),
        errors=errors,
        kappa=kappa,
        mfc_tol=cfg.mfc_tol,
        dx=grid.dx,
        dt=tg.dt,
        samples_per_n=cfg.samples,
        trend_ok=trend_ok,
        strict_decrease_ok=strict,
        wall_times=wall_times,
        sample_rows=sample_rows,
    )


def write_convergence_report(report: ConvergenceReport, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.csv")
    rows = [
        [n, e, report.kappa, report.mfc_tol, report.dx, report.dt,
         report.samples_per_n]
        for n, e in zip(report.n_values, report.errors)
    ]
    write_csv(
        report_path,
        ["n", "e_sup", "kappa_slack", "mfc_tol", "dx", "dt", "samples"],
        rows,
    )
    samples_path = os.path.join(out_dir, "samples.csv")
    write_csv(
        samples_path,
        ["n", "k", "t", "x", "u_limit", "v_hierarchy", "abs_err",
         "kappa_slack", "mfc_tol"],
        report.sample_rows,
    )
    dat_path = os.path.join(out_dir, "e_of_n.dat")
    atomic_write_text(
        dat_path,
        "".join(f"{n} {fmt(e)}\n" for n, e in zip(report.n_values, report.errors)),
    )
    return [report_path, samples_path, dat_path]


# ---------------------------------------------------------------------------
# estimate tables
# ---------------------------------------------------------------------------

def run_estimate_tables(cfg: ExperimentConfig, out_dir: str | None = None,
                        log=sys.stderr) -> dict:
    """Crude-bound, gradient, and modulus tables with uniformity flags."""
    model = build_model(cfg)
    grid = SpaceGrid(cfg.nx)
    tg = TimeGrid(0.0, cfg.t_horizon, cfg.nt)
    out_dir = out_dir or cfg.out_dir

    crude_rows = []
    grad_rows = []
    modulus_rows = []
    sols: dict[int, HierarchySolution] = {}
    for n in cfg.n_list:
        sols[n] = solve_hierarchy(n, model, grid, tg, cfg.r_trunc)
        crude_rows.append([n, check_crude_bound(sols[n]), grid.dx, tg.dt])
        grad_rows.append([n, check_gradient_scaling(sols[n]), grid.dx, tg.dt])
        print(f"[tables] N={n}: crude={crude_rows[-1][1]:.4f} "
              f"grad={grad_rows[-1][1]:.4f}", file=log)

    fine = SpaceGrid(1999)
    rng = np.random.default_rng(cfg.seed)
    for n in cfg.n_list:
        sol = sols[n]
        modulus = 0.0
        sandwich_all = True
        for _ in range(256):
            k = int(rng.integers(1, n + 1))
            m = int(rng.integers(1, n + 1))
            t, s = rng.uniform(0.0, cfg.t_horizon, size=2)
            x = rng.uniform(0.01, 0.99, size=k)
            y = rng.uniform(0.01, 0.99, size=m)
            va = eval_value(sol, k, t, x)
            vb = eval_value(sol, m, s, y)
            ca, cb = EmpiricalConfig(n, x), EmpiricalConfig(n, y)
            dval = metric_d_fast(embed_empirical(ca, fine), embed_empirical(cb, fine))
            den = np.sqrt(abs(t - s)) + dval
            if den > 1e-9:
                modulus = max(modulus, abs(va - vb) / den)
            sandwich_all &= compare_metrics(ca, cb)[2]
        modulus_rows.append([n, modulus, int(sandwich_all), grid.dx, tg.dt])

    def ratio(rows):
        vals = [r[1] for r in rows]
        lo = min(vals)
        return max(vals) / lo if lo > 0 else 1.0

    uniform_ok = (
        ratio(crude_rows) <= 2.0
        and ratio(grad_rows) <= 2.0
        and ratio(modulus_rows) <= 2.0
        and all(bool(r[2]) for r in modulus_rows)
    )

    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    write_csv(os.path.join(out_dir, "crude_bound.csv"),
              ["n", "n_max_level_gap", "dx", "dt"], crude_rows)
    write_csv(os.path.join(out_dir, "gradient_bound.csv"),
              ["n", "n_max_gradient", "dx", "dt"], grad_rows)
    write_csv(os.path.join(out_dir, "modulus.csv"),
              ["n", "holder_lipschitz_modulus", "sandwich_ok", "dx", "dt"],
              modulus_rows)
    paths["crude"] = os.path.join(out_dir, "crude_bound.csv")
    paths["gradient"] = os.path.join(out_dir, "gradient_bound.csv")
    paths["modulus"] = os.path.join(out_dir, "modulus.csv")
    paths["uniform_ok"] = uniform_ok
    return paths
