"""The limiting control problem over sub-probability measures.

U(t0, m0) is computed from the forward-backward optimality system: a
backward HJB for the adjoint field u with source dF/dm(m_t, .), the
feedback alpha = -D_p H(x, Du) clamped at the truncation radius, and the
forward absorbing Fokker-Planck for m.  The fixed point is stabilized by
fictitious play: the forward input is the running average of best-response
paths with weights beta_k = 2/(k+2).  Convergence is checked, not assumed;
the reported value always comes from the last best-response pair (m_hat,
alpha), which is feasible by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded

from .errors import CFLError, SolverDivergenceError
from .fp import DriftField, FPPath, diffusion_factor, solve_fp
from .geometry import GridDensity, SpaceGrid, TimeGrid
from .metric import metric_d_fast
from .model import (
    ModelSpec,
    feedback_batch,
    lagrangian_batch,
    truncated_hamiltonian_batch,
)


@dataclass
class MFCSolution:
    """Coupled paths (u, m, alpha), the value, and the fixed-point diagnostics."""

    u_path: np.ndarray        # (nt+1, nx+2), zero on the boundary rows
    m_path: FPPath
    alpha_path: DriftField
    value: float
    iterations: int
    residual: float           # terminal fixed-point gap, sup_t d(m_t, m_hat_t)
    converged: bool
    clamp_active: bool        # whether the feedback clamp ever engaged
    sup_grad: float           # measured sup |Du|
    residual_history: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)


def _monotone_cfl_check(tgrid: TimeGrid, grid: SpaceGrid, r: float) -> None:
    if tgrid.dt > grid.dx / (2.0 * r) * (1 + 1e-12):
        need = int(math.ceil((tgrid.t_final - tgrid.t0) * 2.0 * r / grid.dx))
        raise CFLError(
            f"dt={tgrid.dt:.3e} violates the monotonicity bound dx/(2R)="
            f"{grid.dx / (2 * r):.3e}; use nt >= {need}",
            suggested_nt=need,
        )


def gradient_nodes(u_row: np.ndarray, dx: float) -> np.ndarray:
    """Du on all nodes: centered in the interior, one-sided at the boundary."""
    return np.gradient(u_row, dx, edge_order=1)


def solve_hjb_backward(
    m_path: FPPath, model: ModelSpec, tgrid: TimeGrid, r: float
) -> np.ndarray:
    """Backward semi-implicit solve of the adjoint HJB along a given m path.

    Implicit diffusion (prefactored tridiagonal Cholesky), explicit monotone
    Lax-Friedrichs Hamiltonian H^R, Dirichlet zero laterally, terminal data
    dG/dm(m_T, .).  The LF viscosity is theta/2 with theta = min(R, max |Du|
    seen at the step), as in the hierarchy solver.
    """
    grid = m_path.grid
    if m_path.tgrid.nt != tgrid.nt:
        raise ValueError("m path tabulated on a different time grid")
    _monotone_cfl_check(tgrid, grid, r)

    nx, dx, dt = grid.nx, grid.dx, tgrid.dt
    xi = grid.interior
    factor = diffusion_factor(grid, dt)
    u = np.zeros((tgrid.nt + 1, nx + 2))
    u[-1, 1:-1] = model.term_cost_derivative(m_path.density(tgrid.nt), xi)

    for k in range(tgrid.nt - 1, -1, -1):
        cur = u[k + 1]
        pbar = (cur[2:] - cur[:-2]) / (2.0 * dx)
        theta = min(float(r), float(np.abs(pbar).max()) if pbar.size else 0.0)
        ham = truncated_hamiltonian_batch(model, xi, pbar, r)
        ham = ham - 0.5 * theta * (cur[2:] - 2.0 * cur[1:-1] + cur[:-2]) / dx
        source = np.asarray(model.run_cost_derivative(m_path.density(k), xi))
        rhs = cur[1:-1] + dt * (source - ham)
        u[k, 1:-1] = cho_solve_banded((factor, False), rhs)
    return u


def feedback_drift(
    u: np.ndarray, model: ModelSpec, grid: SpaceGrid, tgrid: TimeGrid, r: float
) -> tuple[DriftField, bool, float]:
    """alpha = clamp(-D_p H(x, Du), R) nodewise; reports clamp use and sup|Du|."""
    du = np.gradient(u, grid.dx, axis=1, edge_order=1)
    raw = feedback_batch(model, np.broadcast_to(grid.nodes, u.shape), du)
    clamped = np.clip(raw, -r, r)
    return (
        DriftField(grid, tgrid, clamped),
        bool(np.any(np.abs(raw) > r)),
        float(np.abs(du).max()),
    )


def evaluate_cost(m_path: FPPath, alpha_path: DriftField, model: ModelSpec) -> float:
    """Trapezoidal time-space quadrature of running cost, plus terminal cost."""
    grid, tgrid = m_path.grid, m_path.tgrid
    dx = grid.dx
    xi = grid.interior
    rates = np.zeros(tgrid.nt + 1)
    for k in range(tgrid.nt + 1):
        lagr = lagrangian_batch(model, xi, alpha_path.values[k, 1:-1])
        rates[k] = dx * np.sum(lagr * m_path.values[k, 1:-1])
        rates[k] += model.run_cost(m_path.density(k))
    return float(np.trapezoid(rates, dx=tgrid.dt) + model.term_cost(m_path.density(tgrid.nt)))


def solve_mfc(
    t0: float,
    m0: GridDensity,
    model: ModelSpec,
    tgrid: TimeGrid,
    r: float,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> MFCSolution:
    """Fictitious-play fixed point of the forward-backward system."""
    if abs(tgrid.t0 - t0) > 1e-12:
        raise ValueError(f"time grid starts at {tgrid.t0}, not t0={t0}")
    grid = m0.grid

    current = solve_fp(m0, DriftField.zero(grid, tgrid), tgrid)
    history: list[float] = []
    costs: list[float] = []
    doublings = 0
    best = None

    for it in range(max_iter):
        u = solve_hjb_backward(current, model, tgrid, r)
        alpha, clamp_used, sup_grad = feedback_drift(u, model, grid, tgrid, r)
        response = solve_fp(m0, alpha, tgrid)
        residual = max(
            metric_d_fast(current.density(k), response.density(k))
            for k in range(tgrid.nt + 1)
        )
        history.append(residual)
        value = evaluate_cost(response, alpha, model)
        costs.append(value)
        candidate = MFCSolution(
            u_path=u,
            m_path=response,
            alpha_path=alpha,
            value=value,
            iterations=it + 1,
            residual=residual,
            converged=residual < tol,
            clamp_active=clamp_used,
            sup_grad=sup_grad,
            residual_history=history,
            cost_history=costs,
        )
        if best is None or residual <= best.residual:
            best = candidate
        if residual < tol:
            return candidate

        if len(history) >= 2 and history[-1] > 2.0 * history[-2]:
            doublings += 1
            if doublings >= 5:
                raise SolverDivergenceError(
                    f"fixed point diverged: residual doubled 5x in a row "
                    f"(last {history[-1]:.3e})",
                    history=history,
                )
        else:
            doublings = 0

        beta = 2.0 / (it + 2.0)
        mixed = (1.0 - beta) * current.values + beta * response.values
        masses = grid.dx * mixed[:, 1:-1].sum(axis=1)
        current = FPPath(grid, tgrid, mixed, masses)

    return best


def dpp_residual(
    solution: MFCSolution,
    h: float,
    model: ModelSpec,
    r: float,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> float:
    """One-step dynamic-programming defect at time increment h.

    Recomputes the value from the evolved measure with a fresh solve and
    compares against running cost on [t0, t0+h] plus the original value.
    """
    tg = solution.m_path.tgrid
    steps = h / tg.dt
    if abs(steps - round(steps)) > 1e-9 or not 0 < h < tg.t_final - tg.t0 + 1e-12:
        raise ValueError(f"h={h} is not a positive multiple of dt within the horizon")
    j = int(round(steps))

    grid = solution.m_path.grid
    dx = grid.dx
    xi = grid.interior
    rates = np.zeros(j + 1)
    for k in range(j + 1):
        lagr = lagrangian_batch(model, xi, solution.alpha_path.values[k, 1:-1])
        rates[k] = dx * np.sum(lagr * solution.m_path.values[k, 1:-1])
        rates[k] += model.run_cost(solution.m_path.density(k))
    partial = float(np.trapezoid(rates, dx=tg.dt))

    sub_tg = TimeGrid(tg.t0 + h, tg.t_final, tg.nt - j)
    m_h = solution.m_path.density(j)
    tail = solve_mfc(sub_tg.t0, m_h, model, sub_tg, r, tol=tol, max_iter=max_iter)
    return abs(solution.value - (partial + tail.value))


def truncation_gap(
    t0: float,
    m0: GridDensity,
    model: ModelSpec,
    tgrid: TimeGrid,
    r1: float,
    r2: float,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> float:
    """|U^{R1} - U^{R2}|: zero once both radii exceed the measured sup |Du|."""
    v1 = solve_mfc(t0, m0, model, tgrid, r1, tol=tol, max_iter=max_iter)
    v2 = solve_mfc(t0, m0, model, tgrid, r2, tol=tol, max_iter=max_iter)
    return abs(v1.value - v2.value)


def regularity_modulus(
    model: ModelSpec,
    grid: SpaceGrid,
    t_final: float,
    nt: int,
    r: float,
    n_times: int = 4,
    n_measures: int = 6,
    seed: int = 0,
    tol: float = 1e-4,
    max_iter: int = 120,
) -> tuple[float, float]:
    """Empirical space/time moduli of U over random (t, m) samples.

    C_space = sup |U(t,m) - U(t,n)| / d(m,n) over same-time pairs;
    C_time = sup |U(t,m) - U(s,m)| / |t-s|^{1/2} over same-measure pairs.
    Pairs with denominator below 1e-9 are excluded (the 0/0 guard).
    """
    rng = np.random.default_rng(seed)
    xi = grid.interior
    base_tg = TimeGrid(0.0, t_final, nt)

    t_indices = sorted(rng.choice(nt, size=n_times, replace=False))
    measures = []
    for _ in range(n_measures):
        profile = rng.uniform(0.2, 1.0, size=grid.nx) * np.sin(np.pi * xi)
        mass = rng.uniform(0.15, 0.9)
        profile *= mass / (grid.dx * profile.sum())
        values = np.zeros(grid.nx + 2)
        values[1:-1] = profile
        measures.append(GridDensity(grid, values))

    u_vals = np.zeros((n_times, n_measures))
    for i, j_t in enumerate(t_indices):
        sub = TimeGrid(base_tg.nodes[j_t], t_final, nt - j_t)
        for j, m in enumerate(measures):
            u_vals[i, j] = solve_mfc(sub.t0, m, model, sub, r,
                                     tol=tol, max_iter=max_iter).value

    c_space = 0.0
    for i in range(n_times):
        for a in range(n_measures):
            for b in range(a + 1, n_measures):
                den = metric_d_fast(measures[a], measures[b])
                if den > 1e-9:
                    c_space = max(c_space, abs(u_vals[i, a] - u_vals[i, b]) / den)
    c_time = 0.0
    times = base_tg.nodes[t_indices]
    for j in range(n_measures):
        for a in range(n_times):
            for b in range(a + 1, n_times):
                den = math.sqrt(abs(times[a] - times[b]))
                if den > 1e-9:
                    c_time = max(c_time, abs(u_vals[a, j] - u_vals[b, j]) / den)
    return float(c_space), float(c_time)
