import os
import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)


def _complete(path: Path) -> bool:
    return all((path / name).is_file() for name in MNIST_FILES)


def find_mnist() -> Path | None:
    """MNIST directory from ``BITROBUST_MNIST``, else ``data/mnist``, fetching it once if absent."""
    env = os.environ.get("BITROBUST_MNIST")
    if env:
        return Path(env) if _complete(Path(env)) else None
    local = ROOT / "data" / "mnist"
    if not _complete(local):
        subprocess.run([sys.executable, str(ROOT / "scripts" / "fetch_mnist.py"), "--out", str(local)], check=False)
    return local if _complete(local) else None


@pytest.fixture(scope="session")
def mnist_dir():
    path = find_mnist()
    if path is None:
        pytest.skip("MNIST files unavailable (set BITROBUST_MNIST or run scripts/fetch_mnist.py)")
    return path


_CRITERIA: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line, shown in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
