"""Collects acceptance outcomes and prints one summary line per criterion."""
_CRITERIA = {}
_OUTCOMES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _CRITERIA[item.nodeid] = (n, title)


def pytest_runtest_logreport(report):
    if report.nodeid not in _CRITERIA:
        return
    if report.when == "call" or report.failed or report.skipped:
        n, _ = _CRITERIA[report.nodeid]
        ok = report.passed and not report.skipped
        _OUTCOMES.setdefault(n, {})[report.nodeid] = _OUTCOMES.get(n, {}).get(report.nodeid, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance")
    titles = {}
    for n, title in _CRITERIA.values():
        titles.setdefault(n, title)
    for n in sorted(titles):
        results = _OUTCOMES.get(n, {})
        expected = sum(1 for m, _ in _CRITERIA.values() if m == n)
        if len(results) < expected:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results.values()) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {n} {titles[n]}: {status}")
