import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "parameter counts",
    2: "gradcheck suite",
    3: "loss invariants",
    4: "dsp oracles",
    5: "mixing protocol",
    6: "overfit, all four variants",
    7: "schedule and clipping",
    8: "determinism and resume",
    9: "cross-dataset harness",
    10: "gate probe",
}

_outcomes: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        got = _outcomes.get(n)
        if not got:
            status = "NOT RUN"
        elif all(o == "passed" for o in got):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {title}")
