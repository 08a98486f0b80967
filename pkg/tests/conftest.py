import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, [title, True, False, "", ""])
    for line in report.capstdout.splitlines():
        if line.startswith(f"[criterion {n}]"):
            entry[4] = line.split(": ", 1)[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry[2] = True
        if report.outcome != "passed":
            entry[1] = False
            if report.longrepr is not None:
                msg = getattr(report.longrepr, "reprcrash", None)
                entry[3] = msg.message.splitlines()[0] if msg is not None else str(report.longrepr)[:120]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, ran, why, measured = _criteria[n]
        status = "PASS" if ok and ran else ("FAIL" if ran else "NOT RUN")
        line = f"criterion {n:2d} {status}: {title}"
        if status == "FAIL" and why:
            line += f"  ({why})"
        if measured:
            line += f"  [{measured}]"
        tr.write_line(line)
