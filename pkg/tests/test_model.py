"""Hamiltonians, feedback, cost functionals, and the standing assumptions."""

import numpy as np
import pytest

from absorbing_mfc import (
    EmpiricalConfig,
    GridDensity,
    ModelSpec,
    SpaceGrid,
    eval_cost_functionals,
    hamiltonian,
    metric_d_fast,
    optimal_feedback,
    quadratic_model,
    truncated_hamiltonian,
)

from conftest import random_density


def quartic_model():
    """Convex non-quadratic Lagrangian exercising the numerical sup path."""
    zeros = lambda m: 0.0
    dzeros = lambda m, x: np.zeros_like(np.asarray(x, dtype=float))
    return ModelSpec(
        lagrangian=lambda x, a: 0.25 * a**4 + 0.1 * a * a,
        run_cost=zeros,
        term_cost=zeros,
        run_cost_derivative=dzeros,
        term_cost_derivative=dzeros,
        lip_F=0.0,
        lip_G=0.0,
        horizon=0.5,
    )


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------

def test_hamiltonian_closed_form(quad):
    assert hamiltonian(quad, 0.5, 0.0) == 0.0
    assert hamiltonian(quad, 0.5, 2.0) == pytest.approx(2.0)


def test_hamiltonian_growth_bound(quad):
    # |H| <= C (1 + p^2) with C = 1 for the quadratic family
    assert hamiltonian(quad, 0.3, 10.0) == pytest.approx(50.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, p = rng.uniform(0, 1), rng.uniform(-20, 20)
        assert abs(hamiltonian(quad, x, p)) <= 1.0 * (1 + p * p) + 1e-12


def test_hamiltonian_rejects_nonfinite(quad):
    with pytest.raises(ValueError, match="non-finite"):
        hamiltonian(quad, 0.5, np.nan)


def test_legendre_consistency_closed_and_numeric(quad):
    rng = np.random.default_rng(1)
    numeric = quartic_model()
    for _ in range(1000):
        x, p = rng.uniform(0, 1), rng.uniform(-5, 5)
        a = optimal_feedback(quad, x, p)
        assert hamiltonian(quad, x, p) == pytest.approx(
            -a * p - quad.lagrangian(x, a), abs=1e-10
        )
    for _ in range(50):
        x, p = rng.uniform(0, 1), rng.uniform(-3, 3)
        a = optimal_feedback(numeric, x, p)
        assert hamiltonian(numeric, x, p) == pytest.approx(
            -a * p - numeric.lagrangian(x, a), abs=1e-10
        )


# ---------------------------------------------------------------------------
# truncated Hamiltonian
# ---------------------------------------------------------------------------

def _brute_force_trunc(model, x, p, r, npts=1_000_001):
    a = np.linspace(-r, r, npts)
    lagr = np.array([model.lagrangian(x, ai) for ai in a]) if model.lagrangian_batch is None \
        else model.lagrangian_batch(x, a)
    return float(np.max(-lagr - a * p))


def test_truncated_examples_against_brute_force(quad):
    oracle = _brute_force_trunc(quad, 0.5, 1.0, 2.0)
    assert oracle == pytest.approx(0.5, abs=1e-9)
    assert truncated_hamiltonian(quad, 0.5, 1.0, 2.0) == pytest.approx(oracle, abs=1e-9)
    oracle = _brute_force_trunc(quad, 0.5, 5.0, 2.0)
    assert oracle == pytest.approx(8.0, abs=1e-9)
    assert truncated_hamiltonian(quad, 0.5, 5.0, 2.0) == pytest.approx(oracle, abs=1e-9)
    for r in (0.5, 1.0, 7.0):
        assert truncated_hamiltonian(quad, 0.5, 0.0, r) == 0.0


def test_truncated_agrees_with_full_inside_radius(quad):
    rng = np.random.default_rng(2)
    for _ in range(200):
        p = rng.uniform(-3, 3)
        r = abs(p) + rng.uniform(0.0, 2.0)
        assert truncated_hamiltonian(quad, 0.4, p, r) == hamiltonian(quad, 0.4, p)


def test_truncated_monotone_in_radius(quad):
    p = 4.0
    values = [truncated_hamiltonian(quad, 0.5, p, r) for r in (0.5, 1, 2, 4, 8)]
    assert all(b >= a - 1e-14 for a, b in zip(values, values[1:]))


def test_truncated_numeric_path():
    numeric = quartic_model()
    for (p, r) in [(1.0, 2.0), (5.0, 1.5), (-3.0, 0.7)]:
        oracle = _brute_force_trunc(numeric, 0.2, p, r, npts=200_001)
        assert truncated_hamiltonian(numeric, 0.2, p, r) == pytest.approx(
            oracle, abs=1e-7
        )


def test_truncated_rejects_bad_radius(quad):
    with pytest.raises(ValueError, match="radius"):
        truncated_hamiltonian(quad, 0.5, 1.0, 0.0)


# ---------------------------------------------------------------------------
# feedback
# ---------------------------------------------------------------------------

def test_feedback_values(quad):
    assert optimal_feedback(quad, 0.5, 0.0) == 0.0
    assert optimal_feedback(quad, 0.5, 1.5) == -1.5


def test_lagrangian_convexity_midpoint(quad):
    a = np.linspace(-5, 5, 101)
    mid = 0.5 * (a[:-1] + a[1:])
    for x in (0.1, 0.5, 0.9):
        left = np.array([quad.lagrangian(x, ai) for ai in a[:-1]])
        right = np.array([quad.lagrangian(x, ai) for ai in a[1:]])
        center = np.array([quad.lagrangian(x, ai) for ai in mid])
        assert np.all(center <= 0.5 * (left + right) + 1e-12)


# ---------------------------------------------------------------------------
# cost functionals
# ---------------------------------------------------------------------------

def test_cost_on_zero_and_uniform(quad):
    g = SpaceGrid(64)
    f0, g0, df, dg = eval_cost_functionals(quad, GridDensity.zero(g))
    assert f0 == 0.0 and g0 == 0.0
    uniform = GridDensity(g, np.r_[0.0, np.ones(64), 0.0])
    f1, _, df, dg = eval_cost_functionals(quad, uniform)
    expected = 2 / np.pi + 0.5 * (2 / np.pi) ** 2
    assert f1 == pytest.approx(expected, abs=1e-3)
    assert df[0] == 0.0 and df[-1] == 0.0
    assert dg[0] == 0.0 and dg[-1] == 0.0


def test_derivative_matches_difference_quotient(quad):
    g = SpaceGrid(48)
    rng = np.random.default_rng(3)
    eps = 1e-5
    for _ in range(10):
        m = random_density(g, rng, mass=0.4)
        direction = np.zeros(g.nx + 2)
        direction[1:-1] = rng.standard_normal(g.nx)
        bumped = GridDensity(g, np.maximum(m.values + eps * direction, 0.0))
        delta = (bumped.values - m.values) / eps  # actual realized direction
        quotient = (quad.run_cost(bumped) - quad.run_cost(m)) / eps
        _, _, df, _ = eval_cost_functionals(quad, m)
        pairing = g.dx * np.sum(df[1:-1] * delta[1:-1])
        assert abs(quotient - pairing) <= 10 * eps


def test_cost_lipschitz_in_metric(quad):
    g = SpaceGrid(48)
    rng = np.random.default_rng(4)
    for _ in range(30):
        m = random_density(g, rng)
        n = random_density(g, rng)
        d = metric_d_fast(m, n)
        assert abs(quad.run_cost(m) - quad.run_cost(n)) <= quad.lip_F * d + 1e-12
        assert abs(quad.term_cost(m) - quad.term_cost(n)) <= quad.lip_G * d + 1e-12


def test_empirical_batch_matches_scalar(quad):
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 1, (20, 3))
    alive = (pts > 0) & (pts < 1)
    batch = quad.run_cost_batch(pts, alive, 4)
    for row, al, expect in zip(pts, alive, batch):
        assert quad.run_cost(EmpiricalConfig(4, row[al])) == pytest.approx(expect)


def test_mass_guard(quad):
    g = SpaceGrid(16)
    v = np.zeros(18)
    v[1:-1] = 1.0 / (16 * g.dx) * 1.0000000002  # just above mass 1
    d = GridDensity.__new__(GridDensity)  # bypass constructor clamp
    d.grid, d.values = g, v
    with pytest.raises(ValueError, match="sub-probability"):
        eval_cost_functionals(quad, d)
