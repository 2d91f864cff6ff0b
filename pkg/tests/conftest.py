"""Shared pytest plumbing: a collector for acceptance verdict lines.

Acceptance tests record one line each; the terminal summary prints them
all so a plain `pytest -v` run ends with the verdict table.
"""

_verdicts = []


def record_verdict(line: str) -> None:
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus):
    if not _verdicts:
        return
    terminalreporter.section("acceptance verdicts")
    for line in _verdicts:
        terminalreporter.write_line(line)
