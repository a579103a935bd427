import numpy as np
import pytest

from hybridkoopman.core import paper_example
from hybridkoopman.spectral import (
    Asymptotics,
    Grid,
    PoincareSection,
    amplitude_eigenfunction,
    find_limit_cycle,
    floquet,
    phase_eigenfunction,
)


@pytest.fixture(scope="session")
def system():
    return paper_example()


@pytest.fixture(scope="session")
def section(system):
    return PoincareSection(system, 0, "x1 - 2", [2.0, 2.0])


@pytest.fixture(scope="session")
def report(system, section):
    cycle = find_limit_cycle(system, section, [2.0, 2.0])
    return floquet(system, section, cycle.x_star, cycle.tau)


@pytest.fixture(scope="session")
def coarse_grid():
    return Grid.parse("10,10:1,2,0.1,2")


@pytest.fixture(scope="session")
def eigenfunctions(system, report, coarse_grid):
    asym = Asymptotics(system, report)
    amp = amplitude_eigenfunction(system, report, coarse_grid, asym=asym)
    phase = phase_eigenfunction(system, report, coarse_grid, asym=asym)
    return phase, amp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
