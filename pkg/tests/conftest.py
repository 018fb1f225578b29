"""Shared fixtures and the acceptance summary printed after the run."""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record and print one PASS/FAIL line; the test still asserts afterwards."""

    def _report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
