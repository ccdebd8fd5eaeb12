import re

CRITERIA = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        CRITERIA[n] = ("PASS" if report.outcome == "passed" else "FAIL", report.nodeid.split("::")[-1], detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, name, detail = CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n:2d} {name}: {detail}")
