"""Prints one PASS/FAIL line per acceptance criterion after the run."""

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = _CRITERIA.get(report.nodeid)
    if marker is None:
        return
    if report.when == "call" or report.failed:
        number, title, _ = marker
        measured = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _CRITERIA[report.nodeid] = (number, title, (report.outcome, measured))


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA[item.nodeid] = (m.args[0], m.args[1], None)


def pytest_terminal_summary(terminalreporter):
    done = sorted(v for v in _CRITERIA.values() if v[2] is not None)
    if not done:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, (outcome, measured) in done:
        status = "PASS" if outcome == "passed" else "FAIL"
        line = f"[{status}] criterion {number:>2}: {title}"
        if measured:
            line += f" ({measured})"
        terminalreporter.write_line(line)
