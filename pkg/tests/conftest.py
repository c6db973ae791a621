"""Shared pytest wiring: terminal summary for the acceptance criteria."""

import helpers


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not helpers.ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(helpers.ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
