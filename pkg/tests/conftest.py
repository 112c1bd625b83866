from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.failed or report.when == "call":
        prev = _ACCEPTANCE.get(name, ("PASS", 0.0))
        status = "FAIL" if report.failed or prev[0] == "FAIL" else "PASS"
        _ACCEPTANCE[name] = (status, prev[1] + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status, secs = _ACCEPTANCE[name]
        num, _, label = name[len("test_"):].partition("_")
        terminalreporter.write_line(f"{status}  criterion {int(num):2d}  {label.replace('_', ' ')}  ({secs:.1f}s)")
