"""Per-criterion summary for the acceptance suite."""
import pytest

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if report.failed and not detail:
        detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") \
            else "error"
    _criteria[marker.args[0]] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
