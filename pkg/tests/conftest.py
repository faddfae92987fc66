"""Prints one line per acceptance criterion at the end of the run."""

_RESULTS: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome == "failed" and not detail:
            detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "error"
        if name not in _RESULTS or _RESULTS[name][0] == "PASS":
            _RESULTS[name] = ("PASS" if report.outcome == "passed" else report.outcome.upper(), detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for test, label in CRITERIA.items():
        status, detail = _RESULTS.get(test, ("NOT RUN", ""))
        line = f"{status:<7} {label}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
