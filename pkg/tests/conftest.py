"""Shared pytest hooks: a one-line-per-criterion acceptance summary."""

import pytest

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "status": "PASS", "notes": []})
    if report.skipped and report.when in ("setup", "call"):
        entry["status"] = "SKIP"
        entry["notes"].append(str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else "skipped")
    elif report.failed:
        entry["status"] = "FAIL"
    if report.when == "call":
        entry["notes"].extend(f"{k}={v}" for k, v in item.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        notes = f"  [{'; '.join(e['notes'])}]" if e["notes"] else ""
        terminalreporter.write_line(f"criterion {number}: {e['status']}  {e['title']}{notes}")
