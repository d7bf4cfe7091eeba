"""Collects acceptance outcomes and prints one line per criterion."""

import re

_CRITERIA = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    entry = _CRITERIA.setdefault(key, {"passed": True, "seconds": 0.0, "ran": False})
    entry["seconds"] += report.duration
    if report.when == "call":
        entry["ran"] = True
    if report.failed:
        entry["passed"] = False
    if report.skipped:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), entry in sorted(_CRITERIA.items()):
        status = "PASS" if entry["passed"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {num} ({name.replace('_', ' ')}): {status} "
                                    f"[{entry['seconds']:.1f}s]")
