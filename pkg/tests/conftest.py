import numpy as np
import pytest

from nltumor.grid import GridSpec, TimeGrid


def pytest_addoption(parser):
    parser.addoption("--full", action="store_true", default=False,
                     help="run the expensive control-convergence experiment")


def pytest_configure(config):
    config.addinivalue_line("markers", "full: expensive experiment, runs only with --full")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--full"):
        return
    skip = pytest.mark.skip(reason="needs --full")
    for item in items:
        if "full" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid32():
    return GridSpec(n=32, L=1.0)


@pytest.fixture
def short_time():
    return TimeGrid(T=0.01, nt=10)


def tumour_seed(grid, width=0.1):
    X, Y = grid.centers()
    return -1.0 + 2.0 * np.exp(-((X - 0.5) ** 2 + (Y - 0.5) ** 2) / (2 * width**2))


_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one summary line for an acceptance criterion."""

    def add(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
