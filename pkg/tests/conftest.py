"""Collects outcomes of tests marked ``acceptance`` and prints one line per criterion."""

import pytest

_TITLES: dict[str, str] = {}
_OUTCOMES: dict[str, list[bool]] = {}


def _key(marker) -> str:
    return str(marker.args[0])


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _TITLES.setdefault(_key(marker), marker.args[1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(_key(marker), []).append(report.passed)


def _order(key: str):
    head = key.split("-", 1)[0]
    return (int(head) if head.isdigit() else 99, key)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_TITLES, key=_order):
        results = _OUTCOMES.get(key)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {key:<10} {status:<8} {_TITLES[key]}")
