from __future__ import annotations

import sys
from pathlib import Path

import pytest

from helpers.reports import write_cube_artifacts

TESTS_DIR = Path(__file__).parent
MOCK_WORKER_CMD = [sys.executable, str(TESTS_DIR / "helpers" / "mock_worker.py")]


@pytest.fixture(scope="session")
def cube_artifacts(tmp_path_factory) -> tuple[Path, Path]:
    """Session-wide real STL + stub STEP pair for passing reports."""
    directory = tmp_path_factory.mktemp("cube-artifacts")
    return write_cube_artifacts(directory)


@pytest.fixture()
def mock_worker_cmd() -> list[str]:
    return list(MOCK_WORKER_CMD)
