from __future__ import annotations

import sys
from pathlib import Path
from types import SimpleNamespace

import pytest

# plain helper modules (oracles, corpora) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Acceptance tests set ``criterion.title``; a PASS/FAIL line is emitted after the call."""
    return SimpleNamespace(title=None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call" or "criterion" not in getattr(item, "funcargs", {}):
        return
    title = item.funcargs["criterion"].title or item.name
    line = f"{'PASS' if rep.passed else 'FAIL'}  {title}"
    _ACCEPTANCE_LINES.append(line)
    print(f"\n{line}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
