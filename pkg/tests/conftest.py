"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

from __future__ import annotations

import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "RevIN round trip",
    3: "attention rows stochastic",
    4: "permutation equivariance",
    5: "overfit smoke test",
    6: "benchmark beats baselines",
    7: "ablation ordering",
    8: "history sweep grid",
    9: "metric fidelity",
    10: "determinism",
    11: "checkpoint round trip",
}

_outcomes: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(marker.args[0], []).append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(outcome == "passed" for _, outcome in results):
            status = "PASS"
        else:
            failed = ", ".join(name for name, outcome in results if outcome != "passed")
            status = f"FAIL ({failed})"
        terminalreporter.write_line(f"criterion {n:>2} {title}: {status}")
