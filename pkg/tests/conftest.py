"""Collects the one-line acceptance verdicts and prints them after the run."""
import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail=""):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        VERDICTS.setdefault(number, []).append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for number in sorted(VERDICTS):
        for line in VERDICTS[number]:
            terminalreporter.write_line(line)
