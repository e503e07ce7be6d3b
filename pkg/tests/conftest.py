"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_KEY] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    results = item.config.stash[_KEY]
    entry = results.setdefault(number, {"title": title, "status": "PASS"})
    if report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    elif report.failed:
        entry["status"] = "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_KEY]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        entry = results[number]
        terminalreporter.write_line(f"criterion {number:>2} {entry['status']:<4} {entry['title']}")
