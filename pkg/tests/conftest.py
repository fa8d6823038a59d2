import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, name = mark.args
    entry = _CRITERIA.setdefault(number, {"name": name, "ok": True, "ran": False, "details": []})
    if report.when == "call":
        entry["ran"] = True
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {number:2d} {e['name']:<34s} {status}" + (f"  ({detail})" if detail else ""))
