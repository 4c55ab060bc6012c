"""Collects the acceptance-criterion verdicts and prints them after the run."""

import pytest

VERDICTS = {}


@pytest.fixture
def criterion():
    def record(number, title, check):
        try:
            ok, detail = check()
        except AssertionError as exc:
            ok, detail = False, str(exc)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        VERDICTS[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
