import warnings

import pytest

from sbc.problem_file import builtin_path, load_problem

warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture(scope="session")
def population():
    return load_problem(builtin_path("population"))


@pytest.fixture(scope="session")
def oscillator():
    return load_problem(builtin_path("oscillator"))


@pytest.fixture(scope="session")
def nonlinear_drift():
    return load_problem(builtin_path("nonlinear_drift"))


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
