import re

CRITERIA = {
    1: "geospatial oracle suite",
    2: "sampling soundness",
    3: "alignment bounds",
    4: "gradient correctness",
    5: "loss closed forms",
    6: "metric oracles",
    7: "degenerate equivalence",
    8: "determinism",
    9: "directional end-to-end",
    10: "sweep harness structure",
}

_outcomes: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        if report.outcome == "failed" or n not in _outcomes:
            _outcomes[n] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        outcome = _outcomes.get(n)
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, "NOT RUN")
        terminalreporter.write_line(f"criterion {n:>2} {status:<7} {name}")
