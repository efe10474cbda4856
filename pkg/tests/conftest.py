"""Shared pytest hooks: print a PASS/FAIL line per acceptance item."""

_acceptance_results: dict[str, str] = {}


def _label(nodeid: str) -> str:
    name = nodeid.split("::")[-1]
    return name.removeprefix("test_").replace("_", " ")


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call":
        if report.passed:
            verdict = "PASS"
        elif report.skipped:
            verdict = "SKIP"
        else:
            verdict = "FAIL"
        _acceptance_results[_label(report.nodeid)] = verdict
    elif report.failed:  # setup or teardown error
        _acceptance_results[_label(report.nodeid)] = "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance checklist")
    for label in sorted(_acceptance_results):
        terminalreporter.write_line(f"{label}: {_acceptance_results[label]}")
