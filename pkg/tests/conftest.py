import numpy as np
import pytest

from metasense.em_core import OperatingPoint
from metasense.selfcheck import small_scenario


@pytest.fixture(scope="session")
def op():
    return OperatingPoint(20e9)


@pytest.fixture
def sc_small():
    """N=16 elements, M=16 planar RX, two targets."""
    return small_scenario(16, 16, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
