import pytest

from oracles import line_map

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def small_map():
    return line_map([-1.0, 1.0, 3.0, 5.0, 9.0], [0.0, 4.0, 8.0], 3.0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
