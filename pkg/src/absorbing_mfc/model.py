"""Control-problem data: Lagrangian, Hamiltonians, and the cost functionals.

A ModelSpec bundles the running/terminal cost functionals on measures (both
grid densities and empirical configurations implement ``integrate``), their
linear derivatives, and the Lagrangian.  Closed forms and vectorized batch
hooks are optional: when absent, the Hamiltonian falls back to a bounded 1D
numerical maximization (tolerance 1e-10 on the maximizer).

The built-in quadratic family has L = a^2/2, costs
F(m) = F0 + int f dm + c_f (int w dm)^2 (same shape for G), with f, g, w
vanishing at the boundary so the linear derivatives are compatible with the
boundary-aware metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import GridDensity

FEEDBACK_XATOL = 1e-11


@dataclass(frozen=True)
class ModelSpec:
    """Data of one mean-field control problem with absorption."""

    lagrangian: Callable          # L(x, a), convex in a
    run_cost: Callable            # F(measure) -> float
    term_cost: Callable           # G(measure) -> float
    run_cost_derivative: Callable   # dF(measure, x array) -> array
    term_cost_derivative: Callable  # dG(measure, x array) -> array
    lip_F: float
    lip_G: float
    horizon: float
    control_bound: float = 32.0   # search radius for the generic Hamiltonian sup
    # optional closed forms / vectorized fast paths
    hamiltonian_fn: Optional[Callable] = None           # H(x, p)
    hamiltonian_trunc_fn: Optional[Callable] = None     # H^R(x, p, R), vectorized in p
    feedback_fn: Optional[Callable] = None              # argmax control(x, p)
    lagrangian_batch: Optional[Callable] = None         # L on arrays
    run_cost_batch: Optional[Callable] = None           # F on (M,K) points + alive mask
    term_cost_batch: Optional[Callable] = None
    run_cost_space_grad: Optional[Callable] = None      # D_x dF(measure, x array)
    term_cost_space_grad: Optional[Callable] = None


def _require_finite(p) -> None:
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite momentum {p!r}")


def hamiltonian(model: ModelSpec, x: float, p: float) -> float:
    """H(x,p) = sup_a { -a p - L(x,a) }."""
    _require_finite(p)
    if model.hamiltonian_fn is not None:
        return float(model.hamiltonian_fn(x, p))
    a = optimal_feedback(model, x, p)
    return float(-a * p - model.lagrangian(x, a))


def truncated_hamiltonian(model: ModelSpec, x: float, p: float, r: float) -> float:
    """H^R(x,p) = sup over |a| <= R of { -L(x,a) - a p }; Lipschitz-R in p."""
    _require_finite(p)
    if r <= 0:
        raise ValueError(f"truncation radius must be positive, got {r}")
    if model.hamiltonian_trunc_fn is not None:
        return float(model.hamiltonian_trunc_fn(x, np.asarray(p, dtype=float), r))
    res = minimize_scalar(
        lambda a: a * p + model.lagrangian(x, a),
        bounds=(-r, r),
        method="bounded",
        options={"xatol": FEEDBACK_XATOL},
    )
    # bounded Brent can miss a maximizer pinned at the ends of the interval
    best = min(res.fun, -r * p + model.lagrangian(x, -r), r * p + model.lagrangian(x, r))
    return float(-best)


def optimal_feedback(model: ModelSpec, x: float, p: float) -> float:
    """The maximizer a*(x,p) of -a p - L(x,a); equals -D_p H(x,p)."""
    _require_finite(p)
    if model.feedback_fn is not None:
        return float(model.feedback_fn(x, p))
    b = model.control_bound
    res = minimize_scalar(
        lambda a: a * p + model.lagrangian(x, a),
        bounds=(-b, b),
        method="bounded",
        options={"xatol": FEEDBACK_XATOL},
    )
    return float(res.x)


def truncated_hamiltonian_batch(model: ModelSpec, x, p, r: float) -> np.ndarray:
    """Vectorized H^R over momentum arrays (x broadcastable against p)."""
    if r <= 0:
        raise ValueError(f"truncation radius must be positive, got {r}")
    p = np.asarray(p, dtype=float)
    if model.hamiltonian_trunc_fn is not None:
        return np.asarray(model.hamiltonian_trunc_fn(x, p, r), dtype=float)
    xb = np.broadcast_to(np.asarray(x, dtype=float), p.shape)
    out = np.empty_like(p)
    flat_x, flat_p, flat_o = xb.ravel(), p.ravel(), out.ravel()
    for i in range(flat_p.size):
        flat_o[i] = truncated_hamiltonian(model, float(flat_x[i]), float(flat_p[i]), r)
    return out


def feedback_batch(model: ModelSpec, x, p) -> np.ndarray:
    """Vectorized optimal feedback over momentum arrays."""
    p = np.asarray(p, dtype=float)
    if model.feedback_fn is not None:
        return np.asarray(model.feedback_fn(x, p), dtype=float)
    xb = np.broadcast_to(np.asarray(x, dtype=float), p.shape)
    out = np.empty_like(p)
    flat_x, flat_p, flat_o = xb.ravel(), p.ravel(), out.ravel()
    for i in range(flat_p.size):
        flat_o[i] = optimal_feedback(model, float(flat_x[i]), float(flat_p[i]))
    return out


def lagrangian_batch(model: ModelSpec, x, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if model.lagrangian_batch is not None:
        return np.asarray(model.lagrangian_batch(x, a), dtype=float)
    xb = np.broadcast_to(np.asarray(x, dtype=float), a.shape)
    out = np.empty_like(a)
    flat_x, flat_a, flat_o = xb.ravel(), a.ravel(), out.ravel()
    for i in range(flat_a.size):
        flat_o[i] = model.lagrangian(float(flat_x[i]), float(flat_a[i]))
    return out


def eval_cost_functionals(model: ModelSpec, m: GridDensity):
    """Both functional values and their derivative fields on m's grid."""
    if m.mass > 1.0 + 1e-12:
        raise ValueError(f"mass {m.mass} violates the sub-probability invariant")
    x = m.grid.nodes
    f_val = float(model.run_cost(m))
    g_val = float(model.term_cost(m))
    df = np.asarray(model.run_cost_derivative(m, x), dtype=float)
    dg = np.asarray(model.term_cost_derivative(m, x), dtype=float)
    return f_val, g_val, df, dg


# ---------------------------------------------------------------------------
# built-in quadratic family
# ---------------------------------------------------------------------------

def _sin_pi(x):
    return np.sin(np.pi * np.asarray(x, dtype=float))


def _sin_pi_grad(x):
    return np.pi * np.cos(np.pi * np.asarray(x, dtype=float))


def quadratic_model(
    c_f: float = 0.5,
    c_g: float = 0.5,
    horizon: float = 0.5,
    run_offset: float = 0.0,
    term_offset: float = 0.0,
) -> ModelSpec:
    """Reference instance: L = a^2/2, H = p^2/2 in closed form.

    F(m) = run_offset + int sin(pi x) dm + c_f (int sin(pi x) dm)^2, G alike
    with c_g / term_offset.  All standing assumptions hold with explicit
    constants: |H| <= 1 + p^2 with C = 1, and the linear derivatives vanish
    at the boundary because sin(pi x) does.
    """

    def run_cost(m):
        s = m.integrate(_sin_pi)
        return run_offset + s + c_f * s * s

    def term_cost(m):
        s = m.integrate(_sin_pi)
        return term_offset + s + c_g * s * s

    def run_cost_derivative(m, x):
        s = m.integrate(_sin_pi)
        return (1.0 + 2.0 * c_f * s) * _sin_pi(x)

    def term_cost_derivative(m, x):
        s = m.integrate(_sin_pi)
        return (1.0 + 2.0 * c_g * s) * _sin_pi(x)

    def run_cost_space_grad(m, x):
        s = m.integrate(_sin_pi)
        return (1.0 + 2.0 * c_f * s) * _sin_pi_grad(x)

    def term_cost_space_grad(m, x):
        s = m.integrate(_sin_pi)
        return (1.0 + 2.0 * c_g * s) * _sin_pi_grad(x)

    def _batch_sum(points, alive, denom):
        w = np.where(alive, _sin_pi(points), 0.0)
        return w.sum(axis=-1) / denom

    def run_cost_batch(points, alive, denom):
        s = _batch_sum(points, alive, denom)
        return run_offset + s + c_f * s * s

    def term_cost_batch(points, alive, denom):
        s = _batch_sum(points, alive, denom)
        return term_offset + s + c_g * s * s

    def hamiltonian_trunc(x, p, r):
        p = np.asarray(p, dtype=float)
        return np.where(np.abs(p) <= r, 0.5 * p * p, r * np.abs(p) - 0.5 * r * r)

    # Lipschitz constants w.r.t. the metric d: |dF/dm| is (1 + 2 c |S|)-Lipschitz
    # in x with S = int w dm <= 1, and the derivative vanishes on the boundary.
    lip_f = (1.0 + 2.0 * abs(c_f)) * np.pi
    lip_g = (1.0 + 2.0 * abs(c_g)) * np.pi

    return ModelSpec(
        lagrangian=lambda x, a: 0.5 * a * a,
        run_cost=run_cost,
        term_cost=term_cost,
        run_cost_derivative=run_cost_derivative,
        term_cost_derivative=term_cost_derivative,
        lip_F=lip_f,
        lip_G=lip_g,
        horizon=horizon,
        hamiltonian_fn=lambda x, p: 0.5 * p * p,
        hamiltonian_trunc_fn=hamiltonian_trunc,
        feedback_fn=lambda x, p: -np.asarray(p, dtype=float),
        lagrangian_batch=lambda x, a: 0.5 * np.asarray(a) ** 2,
        run_cost_batch=run_cost_batch,
        term_cost_batch=term_cost_batch,
        run_cost_space_grad=run_cost_space_grad,
        term_cost_space_grad=term_cost_space_grad,
    )


def zero_cost_model(horizon: float = 0.5) -> ModelSpec:
    """Quadratic Lagrangian with F = G = 0: the exact solution of everything is 0."""
    zeros = lambda m: 0.0
    dzeros = lambda m, x: np.zeros_like(np.asarray(x, dtype=float))
    return ModelSpec(
        lagrangian=lambda x, a: 0.5 * a * a,
        run_cost=zeros,
        term_cost=zeros,
        run_cost_derivative=dzeros,
        term_cost_derivative=dzeros,
        lip_F=0.0,
        lip_G=0.0,
        horizon=horizon,
        hamiltonian_fn=lambda x, p: 0.5 * p * p,
        hamiltonian_trunc_fn=lambda x, p, r: np.where(
            np.abs(p) <= r, 0.5 * np.asarray(p) ** 2, r * np.abs(p) - 0.5 * r * r
        ),
        feedback_fn=lambda x, p: -np.asarray(p, dtype=float),
        lagrangian_batch=lambda x, a: 0.5 * np.asarray(a) ** 2,
        run_cost_batch=lambda points, alive, denom: np.zeros(points.shape[:-1]),
        term_cost_batch=lambda points, alive, denom: np.zeros(points.shape[:-1]),
        run_cost_space_grad=dzeros,
        term_cost_space_grad=dzeros,
    )
