"""Shared pytest hooks for the test suite."""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the acceptance-criterion PASS/FAIL lines at the end of the run.

    The acceptance tests record one line per criterion as they execute; the
    per-test prints are swallowed by capture, so this hook replays them in
    the terminal summary where they are always visible.
    """
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "CRITERION_RESULTS", None) if mod else None
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
