import pytest

_criteria: dict = {}
_details: dict = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    failed = report.failed
    if report.when == "call" or failed or (report.when == "setup" and report.skipped):
        status = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        prev = _criteria.get(marker, {})
        prev.setdefault(status, []).append(report.nodeid.split("::")[-1])
        _criteria[marker] = prev


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = mark.args[0]
        if call.when == "call":
            _details.setdefault(mark.args[0], []).extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        res = _criteria[n]
        status = "FAIL" if "FAIL" in res else ("PASS" if "PASS" in res else "SKIP")
        names = ", ".join(sorted({t for ts in res.values() for t in ts}))
        terminalreporter.write_line(f"criterion {n}: {status}  ({names})")
        for detail in _details.get(n, []):
            terminalreporter.write_line(f"    {detail}")
