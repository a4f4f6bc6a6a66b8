import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_outcomes: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    entry = _outcomes.setdefault(int(m.group(1)), {"name": m.group(2).replace("_", " "),
                                                   "status": "PASS", "detail": ""})
    if report.failed or (report.when == "call" and report.skipped):
        entry["status"] = "FAIL"
    for key, value in report.user_properties:
        if key == "detail":
            entry["detail"] = value


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        line = f"criterion {n:2d} {e['status']}: {e['name']}"
        if e["detail"]:
            line += f" [{e['detail']}]"
        terminalreporter.write_line(line)
