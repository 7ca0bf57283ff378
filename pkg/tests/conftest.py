import numpy as np
import pytest

from ipdnn.em_core import assemble_greens, make_grid
from ipdnn.scenario import default_setup


@pytest.fixture(scope="session")
def small_setup():
    """8x8 grid, 4 transmitters and 4 receivers."""
    return default_setup(n_side=8, n_tx=4, n_rx=4)


@pytest.fixture(scope="session")
def small_greens(small_setup):
    return assemble_greens(small_setup, make_grid(small_setup))


@pytest.fixture(scope="session")
def setup16():
    return default_setup(n_side=16)


@pytest.fixture(scope="session")
def greens16(setup16):
    return assemble_greens(setup16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
