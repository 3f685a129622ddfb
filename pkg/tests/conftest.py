import numpy as np
import pytest

import occflow


@pytest.fixture(autouse=True)
def _double_precision_default():
    # test builds run in double precision; individual tests opt out explicitly
    occflow.set_default_dtype(np.float64)
    yield
    occflow.set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from _acceptance_report import lines

    report = lines()
    if report:
        terminalreporter.section("acceptance criteria")
        for line in report:
            terminalreporter.write_line(line)
