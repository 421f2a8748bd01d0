from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest

ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


@pytest.fixture
def mini_dir() -> Path:
    return Path(str(resources.files("sparseanno") / "data" / "mini"))


@pytest.fixture
def mini(mini_dir):
    from sparseanno.dataset import load_dataset

    return load_dataset(mini_dir / "annotations.json", mini_dir / "verifications.json")


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion; printed in the terminal summary."""

    def record(criterion: str, ok: bool | None, detail: str = ""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        ACCEPTANCE_RESULTS.append((criterion, status, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{status}] {criterion}" + (f"  ({detail})" if detail else ""))
