import pytest

from mfjump.model import builtin_example, solve_mean_ode, uniform_grid


@pytest.fixture
def example2():
    return builtin_example("example2").spec


@pytest.fixture
def coarse_grid():
    return uniform_grid(1.0, 2.0 ** -5)


@pytest.fixture
def example2_mean(example2, coarse_grid):
    return solve_mean_ode(example2, coarse_grid)
