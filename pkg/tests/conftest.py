"""Shared pytest hooks: a one-line-per-criterion acceptance summary."""

from __future__ import annotations

import re

CRITERIA = 10
_CRITERION = re.compile(r"test_criterion_(\d+)")
_outcomes: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "SKIP" if report.outcome == "skipped" else "FAIL"
        _outcomes[number] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, CRITERIA + 1):
        status, detail = _outcomes.get(number, ("NOT RUN", ""))
        terminalreporter.write_line(f"criterion {number:2d}: {status:7s} {detail}".rstrip())
