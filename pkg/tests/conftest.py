import numpy as np
import pytest

from absorbing_mfc import (
    GridDensity,
    SpaceGrid,
    TimeGrid,
    quadratic_model,
    solve_hierarchy,
    zero_cost_model,
)


@pytest.fixture(scope="session")
def quad():
    return quadratic_model()


@pytest.fixture(scope="session")
def zero_model():
    return zero_cost_model()


@pytest.fixture(scope="session")
def suite_grids():
    return SpaceGrid(24), TimeGrid(0.0, 0.5, 400)


@pytest.fixture(scope="session")
def hier_suite(quad, suite_grids):
    """Quadratic hierarchies for N = 1, 2, 3 on the study grid, solved once."""
    grid, tgrid = suite_grids
    return {n: solve_hierarchy(n, quad, grid, tgrid, r=5.0) for n in (1, 2, 3)}


def random_density(grid: SpaceGrid, rng, mass=None) -> GridDensity:
    """Random nonnegative density vanishing at the boundary with given mass."""
    values = np.zeros(grid.nx + 2)
    profile = rng.random(grid.nx) + 0.05
    target = rng.uniform(0.1, 0.95) if mass is None else mass
    values[1:-1] = profile * (target / (grid.dx * profile.sum()))
    return GridDensity(grid, values)
