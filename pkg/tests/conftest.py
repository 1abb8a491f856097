"""Prints the acceptance summary: one PASS/FAIL line per criterion."""
import re

import pytest

_RESULTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = re.match(r"test_c(\d\d)_", item.name)
    if m is None or "test_acceptance" not in item.nodeid:
        return
    n = int(m.group(1))
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    rec = _RESULTS.setdefault(n, {"title": doc, "status": "PASS", "measured": ""})
    if report.failed:
        rec["status"] = "FAIL"
    elif report.skipped and rec["status"] == "PASS":
        rec["status"] = "SKIP"
    props = dict(report.user_properties)
    if "measured" in props:
        rec["measured"] = props["measured"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_RESULTS):
        rec = _RESULTS[n]
        line = f"criterion {n:2d}: {rec['status']}  {rec['title']}"
        if rec["measured"]:
            line += f"  [{rec['measured']}]"
        terminalreporter.write_line(line)
