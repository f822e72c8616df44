import pytest

# acceptance criterion number -> (title, passed, details)
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    _, ok, details = _CRITERIA.get(number, (title, True, []))
    ok = ok and report.passed
    details = details + [f"{k}={v}" for k, v in item.user_properties if report.when == "call"]
    _CRITERIA[number] = (title, ok, details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[number]
        status = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} {status}  {title}"
        if details:
            line += "  [" + ", ".join(details) + "]"
        terminalreporter.write_line(line, green=ok, red=not ok)
