"""Acceptance bookkeeping: one PASS/FAIL line per ``@pytest.mark.criterion`` test."""

import pytest

_RESULTS: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ok = report.passed and number not in {n for n, (_, good, _) in _RESULTS.items() if not good}
    _RESULTS[number] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
