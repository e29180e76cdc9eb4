from __future__ import annotations

import itertools
import sys
import string
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


def enumerate_labels(limit: int) -> list[str]:
    """Column labels A, B, ..., Z, AA, AB, ... produced by plain enumeration."""
    out: list[str] = []
    for width in itertools.count(1):
        for combo in itertools.product(string.ascii_uppercase, repeat=width):
            out.append("".join(combo))
            if len(out) == limit:
                return out


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def leave_path() -> Path:
    return FIXTURES / "leave.xlsx"


@pytest.fixture
def styles_path() -> Path:
    return FIXTURES / "styles.xlsx"


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for line in results:
        terminalreporter.write_line(line)
