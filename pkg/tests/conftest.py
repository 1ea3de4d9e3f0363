from contextlib import contextmanager

import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def check(name: str):
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"{status}  {name}"
            print(line)
            ACCEPTANCE.append(line)

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
