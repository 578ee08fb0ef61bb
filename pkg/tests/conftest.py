from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qsd.dataio import MNIST_FILES  # noqa: E402

MNIST_DIR = Path(os.environ.get("QSD_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return all((MNIST_DIR / f).is_file() for pair in MNIST_FILES.values() for f in pair)


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set QSD_MNIST_DIR)")
    return MNIST_DIR


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, passed: bool, detail: str) -> None:
    """Record (and print) one acceptance line; shown again in the summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
