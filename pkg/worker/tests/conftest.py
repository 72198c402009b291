from __future__ import annotations

import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
WORKER_CMD = [sys.executable, "-m", "cadworker"]


@pytest.fixture(scope="session")
def plate_code() -> str:
    return (FIXTURES / "mounting_plate.py").read_text(encoding="utf-8")


@pytest.fixture()
def worker_cmd() -> list[str]:
    return list(WORKER_CMD)
