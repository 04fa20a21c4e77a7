import numpy as np
import pytest

from oracles import TABLE1, test_input_function

from petkin.kinetics import TimeGrid

# one-line verdicts recorded by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid():
    return TimeGrid.default()


@pytest.fixture(scope="session")
def input_fn():
    return test_input_function()


@pytest.fixture(scope="session")
def table1():
    return TABLE1


@pytest.fixture
def rng():
    return np.random.default_rng(0)
