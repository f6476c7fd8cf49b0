import time

import pytest

_verdicts: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_call(item):
    start = time.perf_counter()
    yield
    item.user_properties.append(("elapsed", time.perf_counter() - start))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = mark.args
    elapsed = dict(item.user_properties).get("elapsed", 0.0)
    verdict = "PASS" if report.passed else "FAIL"
    _verdicts[number] = (verdict, title, elapsed)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        verdict, title, elapsed = _verdicts[number]
        terminalreporter.write_line(f"{verdict} criterion {number}: {title} ({elapsed:.1f} s)")
