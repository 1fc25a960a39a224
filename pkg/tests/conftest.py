import numpy as np
import pytest

from vetocta.data import PhantomConfig, make_phantom

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom():
    cfg = PhantomConfig(nr=6, nx=32, ny=8, nz=32, vessel_count=2, radius_max=2.5, seed=7)
    return make_phantom(cfg)
