import numpy as np
import pytest

from cylimit.geometry import ProblemConfig, barycentric_grid, dual_grid
from cylimit.measures import source_measure, target_measure
from cylimit.potential import potential_from_duals
from cylimit.transport import brenier_map, solve_entropic, solve_exact


class Solved:
    """A solved instance with everything the downstream checks need."""

    def __init__(self, cfg, N, solver):
        self.cfg = cfg
        self.N = N
        self.grid = barycentric_grid(cfg.m, N)
        self.mu = source_measure(self.grid)
        self.dual = dual_grid(cfg, N)
        self.nu = target_measure(self.dual, cfg)
        self.plan = solver(self.mu, self.nu)
        self.bmap = brenier_map(self.plan)
        self.pot = potential_from_duals(self.plan)


@pytest.fixture(scope="session")
def cfg_m1():
    return ProblemConfig(3, 1, (1, 2))


@pytest.fixture(scope="session")
def cfg_m2():
    return ProblemConfig(3, 2, (1, 1, 1))


@pytest.fixture(scope="session")
def m1_exact(cfg_m1):
    return Solved(cfg_m1, 400, solve_exact)


@pytest.fixture(scope="session")
def m1_entropic(cfg_m1):
    return Solved(cfg_m1, 400, solve_entropic)


@pytest.fixture(scope="session")
def m1_small(cfg_m1):
    return Solved(cfg_m1, 60, solve_exact)


@pytest.fixture(scope="session")
def m2_entropic(cfg_m2):
    return Solved(cfg_m2, 60, solve_entropic)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
