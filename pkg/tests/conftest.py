"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""
import re

_OUTCOMES = {}
_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or report.outcome != "passed":
        if report.outcome == "skipped" and hasattr(report, "wasxfail"):
            outcome = "FAIL"
        else:
            outcome = "PASS" if report.outcome == "passed" else "FAIL"
        if _OUTCOMES.get(key) != "FAIL":
            _OUTCOMES[key] = outcome


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), outcome in sorted(_OUTCOMES.items()):
        terminalreporter.write_line(f"criterion {num:2d} {name.replace('_', ' '):32s} {outcome}")
