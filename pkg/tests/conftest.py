"""Collects one verdict line per acceptance criterion and prints them at the end."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """``verdict(number, ok, detail)`` records and prints a criterion outcome."""

    def record(number, ok, detail=""):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[number])
