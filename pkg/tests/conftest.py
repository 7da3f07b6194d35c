import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vbinverse.forward import HelmholtzProblem, assemble_forward_stack, two_bumps
from vbinverse.prior import Grid1D, TruncatedPrior, build_eigensystem

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_problem():
    """A cheap multi-frequency problem: 81 nodes, 6 wavenumbers, both ends measured."""
    grid = Grid1D(81)
    problem = HelmholtzProblem(grid, (1.0, 2.0, 3.0, 4.0, 5.0, 6.0))
    stack = assemble_forward_stack(problem)
    prior = TruncatedPrior.from_threshold(build_eigensystem(grid), 1e-2)
    truth = two_bumps(grid.nodes)
    return problem, stack, prior, truth


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
