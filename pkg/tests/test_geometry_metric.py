"""Grids, measures, the point pseudometric, and the transport metric."""

import numpy as np
import pytest

from absorbing_mfc import (
    EmpiricalConfig,
    GridDensity,
    SpaceGrid,
    compare_metrics,
    dist_boundary,
    embed_empirical,
    matching_oracle,
    metric_d_fast,
    metric_d_lp,
    metric_d_rho_empirical,
    mollify_empirical,
    projected_l2_derivatives,
    rho,
)
from absorbing_mfc.metric import bump, bump_derivative

from conftest import random_density


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

def test_space_grid_nodes():
    g = SpaceGrid(7)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    assert np.all(np.diff(g.nodes) > 0)
    assert g.dx == pytest.approx(1.0 / 8)


def test_grid_density_invariants():
    g = SpaceGrid(7)
    bad = np.full(9, 0.1)
    with pytest.raises(ValueError, match="vanish"):
        GridDensity(g, bad)
    v = np.zeros(9)
    v[4] = -1e-10
    with pytest.raises(ValueError, match="negative"):
        GridDensity(g, v)
    v = np.zeros(9)
    v[1:-1] = 10.0  # mass 10*7/8 > 1
    with pytest.raises(ValueError, match="mass"):
        GridDensity(g, v)


def test_empirical_config_alive():
    c = EmpiricalConfig(3, np.array([0.0, 0.5, 1.0]))
    assert c.alive.tolist() == [False, True, False]
    assert c.mass == pytest.approx(1.0 / 3)
    with pytest.raises(ValueError, match="exceed"):
        EmpiricalConfig(1, np.array([0.1, 0.2]))


# ---------------------------------------------------------------------------
# point pseudometric
# ---------------------------------------------------------------------------

def test_dist_boundary_values():
    assert dist_boundary(0.0) == 0.0
    assert dist_boundary(0.5) == 0.5
    assert dist_boundary(0.9) == pytest.approx(0.1)


def test_rho_values():
    assert rho(0.3, 0.3) == 0.0
    assert rho(0.2, 0.9) == pytest.approx(0.3)   # boundary route beats direct
    assert rho(0.4, 0.5) == pytest.approx(0.1)   # direct route


def test_rho_two_sided_bound_exact():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 500)
    y = rng.uniform(0, 1, 500)
    direct = np.abs(x - y)
    via = dist_boundary(x) + dist_boundary(y)
    r = rho(x, y)
    assert np.all(0.5 * np.minimum(direct, via) <= r + 1e-15)
    assert np.all(r <= np.minimum(direct, via) + 1e-15)


def test_rho_against_lp_oracle_sample():
    # single-atom measures at grid nodes: the grid dual LP evaluates rho exactly
    fine = SpaceGrid(2000)
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = round(rng.uniform(0.01, 0.99) / fine.dx) * fine.dx
        y = round(rng.uniform(0.01, 0.99) / fine.dx) * fine.dx
        ma = embed_empirical(EmpiricalConfig(1, np.array([x])), fine)
        mb = embed_empirical(EmpiricalConfig(1, np.array([y])), fine)
        assert metric_d_lp(ma, mb) == pytest.approx(rho(x, y), abs=1e-6)


# ---------------------------------------------------------------------------
# grid metric: LP oracle and the fast reduction
# ---------------------------------------------------------------------------

def test_lp_identity_and_symmetry():
    g = SpaceGrid(32)
    rng = np.random.default_rng(1)
    m = random_density(g, rng)
    n = random_density(g, rng)
    assert metric_d_lp(m, m) == 0.0
    assert abs(metric_d_lp(m, n) - metric_d_lp(n, m)) <= 1e-10


def test_lp_uniform_vs_zero_exact_combinatorial_value():
    # tent-function optimum: dx^2 * sum_i min(i, nx+1-i), computed directly
    for nx in (63, 64):
        g = SpaceGrid(nx)
        u = GridDensity(g, np.r_[0.0, np.ones(nx), 0.0])
        z = GridDensity.zero(g)
        i = np.arange(1, nx + 1)
        expected = g.dx**2 * np.minimum(i, nx + 1 - i).sum()
        assert metric_d_lp(u, z) == pytest.approx(expected, abs=1e-9)
        if nx == 63:  # midpoint on-grid: the continuum value 1/4 is attained
            assert expected == pytest.approx(0.25, abs=1e-15)


def test_fast_equals_lp_random():
    g = SpaceGrid(64)
    rng = np.random.default_rng(2)
    for _ in range(25):
        m = random_density(g, rng)
        n = random_density(g, rng)
        assert abs(metric_d_fast(m, n) - metric_d_lp(m, n)) <= 1e-6


def test_fast_triangle_inequality():
    g = SpaceGrid(48)
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b, c = (random_density(g, rng) for _ in range(3))
        assert metric_d_fast(a, c) <= metric_d_fast(a, b) + metric_d_fast(b, c) + 1e-10


def test_grid_mismatch_rejected():
    m = GridDensity.zero(SpaceGrid(8))
    n = GridDensity.zero(SpaceGrid(16))
    with pytest.raises(ValueError, match="grids differ"):
        metric_d_fast(m, n)


# ---------------------------------------------------------------------------
# empirical matching metric
# ---------------------------------------------------------------------------

def test_matching_examples():
    assert metric_d_rho_empirical(
        EmpiricalConfig(2, np.array([0.5])), EmpiricalConfig.empty(2)
    ) == pytest.approx(0.25)
    a = EmpiricalConfig(2, np.array([0.3, 0.6]))
    b = EmpiricalConfig(2, np.array([0.35, 0.55]))
    assert metric_d_rho_empirical(a, b) == pytest.approx(0.05)
    assert metric_d_rho_empirical(a, a) == 0.0


def test_matching_equals_exhaustive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(60):
        n = int(rng.integers(1, 7))
        a = EmpiricalConfig(n, rng.uniform(0, 1, rng.integers(0, n + 1)))
        b = EmpiricalConfig(n, rng.uniform(0, 1, rng.integers(0, n + 1)))
        assert metric_d_rho_empirical(a, b) == pytest.approx(
            matching_oracle(a, b), abs=1e-14
        )


def test_matching_metric_axioms():
    rng = np.random.default_rng(6)
    cfgs = [EmpiricalConfig(4, rng.uniform(0, 1, rng.integers(0, 5))) for _ in range(12)]
    for a in cfgs:
        for b in cfgs:
            dab = metric_d_rho_empirical(a, b)
            assert abs(dab - metric_d_rho_empirical(b, a)) <= 1e-14
            for c in cfgs:
                assert dab <= (
                    metric_d_rho_empirical(a, c) + metric_d_rho_empirical(c, b) + 1e-12
                )


def test_boundary_atom_is_free():
    # adding a boundary-class atom changes nothing, exactly
    a = EmpiricalConfig(3, np.array([0.3, 0.7]))
    a_pad = EmpiricalConfig(3, np.array([0.3, 0.7, 1.0]))
    b = EmpiricalConfig(3, np.array([0.45]))
    assert metric_d_rho_empirical(a, b) == metric_d_rho_empirical(a_pad, b)


def test_matching_denominator_mismatch():
    with pytest.raises(ValueError, match="denominators"):
        metric_d_rho_empirical(EmpiricalConfig.empty(2), EmpiricalConfig.empty(3))


# ---------------------------------------------------------------------------
# metric comparison sandwich
# ---------------------------------------------------------------------------

def test_compare_metrics_trivial_and_atom():
    a = EmpiricalConfig(1, np.array([0.5]))
    d_rho, d_val, ok = compare_metrics(a, a)
    assert d_rho == 0.0 and d_val == 0.0 and ok
    d_rho, d_val, ok = compare_metrics(a, EmpiricalConfig.empty(1))
    assert d_rho == pytest.approx(0.5)
    assert d_val == pytest.approx(0.5, abs=1e-3)
    assert ok


def test_compare_metrics_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(40):
        a = EmpiricalConfig(4, rng.uniform(0, 1, rng.integers(0, 5)))
        b = EmpiricalConfig(4, rng.uniform(0, 1, rng.integers(0, 5)))
        assert compare_metrics(a, b)[2]


def test_compare_metrics_lp_route_subsample():
    rng = np.random.default_rng(8)
    for _ in range(3):
        a = EmpiricalConfig(4, rng.uniform(0, 1, 3))
        b = EmpiricalConfig(4, rng.uniform(0, 1, 2))
        fast = compare_metrics(a, b, use_lp=False)
        lp = compare_metrics(a, b, use_lp=True)
        assert fast[1] == pytest.approx(lp[1], abs=1e-6)


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

def test_mollify_empty_and_single_atom():
    g = SpaceGrid(99)
    assert mollify_empirical(EmpiricalConfig.empty(2), 0.1, g).mass == 0.0
    d = mollify_empirical(EmpiricalConfig(2, np.array([0.5])), 0.1, g)
    assert d.mass == pytest.approx(0.5, abs=1e-12)
    support = np.flatnonzero(d.values)
    assert g.nodes[support].min() >= 0.4 - 1e-9
    assert g.nodes[support].max() <= 0.6 + 1e-9


def test_mollify_under_resolution():
    with pytest.raises(ValueError, match="under-resolved"):
        mollify_empirical(EmpiricalConfig(1, np.array([0.5])), 0.001, SpaceGrid(32))


def test_mollify_mass_never_exceeds_alive_mass():
    g = SpaceGrid(63)
    rng = np.random.default_rng(9)
    for _ in range(20):
        cfg = EmpiricalConfig(3, rng.uniform(0, 1, rng.integers(1, 4)))
        d = mollify_empirical(cfg, 0.05, g)
        assert d.mass <= cfg.mass + 1e-12


def test_mollify_transport_deviation_within_kappa():
    g = SpaceGrid(499)
    kappa = 0.05
    rng = np.random.default_rng(10)
    for _ in range(10):
        cfg = EmpiricalConfig(2, rng.uniform(0.1, 0.9, 2))
        d = mollify_empirical(cfg, kappa, g)
        atom = embed_empirical(cfg, g)
        assert metric_d_fast(d, atom) <= kappa + 2 * g.dx


# ---------------------------------------------------------------------------
# derivatives of the mollified squared L2 norm
# ---------------------------------------------------------------------------

def test_projected_l2_empty():
    psi, grads, laps, lap_sum = projected_l2_derivatives(EmpiricalConfig.empty(3), 0.1)
    assert psi == 0.0 and grads.size == 0 and lap_sum == 0.0


def test_projected_l2_boundary_atom_rejected():
    with pytest.raises(ValueError, match="interior"):
        projected_l2_derivatives(EmpiricalConfig(2, np.array([0.5, 1.0])), 0.1)


def test_projected_l2_single_atom_translation_invariance():
    # away from the boundary Psi is constant in the position, so gradient ~ 0
    for x in (0.35, 0.5, 0.61):
        psi, grads, _, _ = projected_l2_derivatives(
            EmpiricalConfig(1, np.array([x])), 0.1
        )
        ref, _ = _norm_sq_of_kernel(0.1)
        assert psi == pytest.approx(ref, rel=1e-9)
        assert abs(grads[0]) <= 1e-10


def _norm_sq_of_kernel(kappa):
    from scipy.integrate import quad

    val, err = quad(lambda u: float(bump(u)) ** 2, -1, 1, epsabs=1e-13, epsrel=1e-13)
    return val / kappa, err


def _psi_of(points, n, kappa):
    return projected_l2_derivatives(EmpiricalConfig(n, points), kappa)[0]


def test_projected_l2_gradient_vs_finite_difference():
    pts = np.array([0.31, 0.44, 0.52, 0.69])
    n, kappa, h = 5, 0.1, 1e-5
    _, grads, _, _ = projected_l2_derivatives(EmpiricalConfig(n, pts), kappa)
    scale = max(1e-12, np.abs(grads).max())
    for i in range(len(pts)):
        up = pts.copy()
        up[i] += h
        dn = pts.copy()
        dn[i] -= h
        fd = (_psi_of(up, n, kappa) - _psi_of(dn, n, kappa)) / (2 * h)
        assert abs(fd - grads[i]) / scale <= 1e-6


def test_projected_l2_laplacian_vs_gradient_differences():
    # laplacian oracle: central difference of the (already validated) gradient
    pts = np.array([0.3, 0.47, 0.66])
    n, kappa, h = 4, 0.1, 1e-5
    _, _, laps, lap_sum = projected_l2_derivatives(EmpiricalConfig(n, pts), kappa)
    scale = max(1.0, np.abs(laps).max())
    for i in range(len(pts)):
        up = pts.copy()
        up[i] += h
        dn = pts.copy()
        dn[i] -= h
        gu = projected_l2_derivatives(EmpiricalConfig(n, up), kappa)[1][i]
        gd = projected_l2_derivatives(EmpiricalConfig(n, dn), kappa)[1][i]
        fd = (gu - gd) / (2 * h)
        assert abs(fd - laps[i]) / scale <= 1e-5
    assert lap_sum == pytest.approx(laps.sum())


def test_projected_l2_summed_laplacian_identity():
    # independent route: -2 ||Drho_k * m||_2^2 + (2K/N^2) ||Drho_k||_2^2 by
    # fine-grid quadrature of the convolved gradient field
    from scipy.integrate import quad

    pts = np.array([0.35, 0.52, 0.6])
    n, kappa = 4, 0.1
    _, _, _, lap_sum = projected_l2_derivatives(EmpiricalConfig(n, pts), kappa)

    ys = np.linspace(pts.min() - kappa, pts.max() + kappa, 20001)
    field = np.zeros_like(ys)
    for x in pts:
        field += bump_derivative((ys - x) / kappa) / kappa**2 / n
    conv_norm = np.trapezoid(field**2, ys)
    dnorm, _ = quad(lambda u: float(bump_derivative(u)) ** 2, -1, 1)
    expected = -2.0 * conv_norm + 2.0 * len(pts) / n**2 * dnorm / kappa**3
    assert lap_sum == pytest.approx(expected, rel=1e-6)
