import numpy as np
import pytest

from polymerlab.walk_kernel import build_kernel


@pytest.fixture(scope="session")
def kernel3():
    """Small d=3 kernel shared by the unit tests."""
    return build_kernel(3, 120)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: long acceptance criteria runs")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
