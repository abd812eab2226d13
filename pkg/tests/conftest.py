"""Shared pytest wiring: a criterion log echoed in the terminal summary."""

import pytest

_CRITERION_LINES: list = []


@pytest.fixture(scope="session")
def criterion_log():
    """Record one PASS/FAIL line per release criterion.

    Lines print immediately (visible with -s) and are replayed in the
    end-of-session summary so they show up in default captured runs too.
    """

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'} {detail}"
        _CRITERION_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _CRITERION_LINES:
        terminalreporter.write_line(line)
