import math

import pytest

from ergostop import Grid, RewardSpec, SolverConfig, ou_model, solve_infinite_horizon, stationary_density

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ou():
    return ou_model(theta=1.0, m=0.0, sigma=math.sqrt(2.0))


@pytest.fixture(scope="session")
def grid(ou):
    return Grid.with_spacing(ou.x_lo, ou.x_hi, 0.02)


@pytest.fixture(scope="session")
def measure(ou, grid):
    return stationary_density(ou, grid)


@pytest.fixture(scope="session")
def tanh_arctan():
    return RewardSpec.from_strings("tanh(x) - 0.5", "arctan(x)", "0")


@pytest.fixture(scope="session")
def tanh_surface(ou, grid, tanh_arctan):
    return solve_infinite_horizon(ou, grid, tanh_arctan, SolverConfig())
