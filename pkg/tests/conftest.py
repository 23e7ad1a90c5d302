"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        _RESULTS.append((marker.args[0], marker.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, passed, detail in sorted(_RESULTS):
        line = f"[{'PASS' if passed else 'FAIL'}] {number}. {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
