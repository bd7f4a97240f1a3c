import numpy as np
import pytest

from charguide.schedule import build_linear_schedule

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def sched1000():
    return build_linear_schedule(1000, 1e-4, 0.015)


@pytest.fixture(scope="session")
def sched500():
    return build_linear_schedule(500, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number}] {detail}")
