import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tornadoseg.tensor import default_dtype  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def run_cli(*args: str) -> subprocess.CompletedProcess:
    """Run ``python3 -m tornadoseg.cli`` in a fresh interpreter."""
    cmd = [sys.executable, "-m", "tornadoseg.cli", *args]
    return subprocess.run(cmd, capture_output=True, text=True, check=False)


# Full-size toy runs are slow on one core, so each configuration runs once
# per session and the tests share its output directory.
TOY_RUNS = {
    "main": (),
    "no_tv": ("--set", "loss.beta_tv=0"),
    "main_repeat": (),
}


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    cache: dict = {}

    def get(name: str):
        if name not in cache:
            out = tmp_path_factory.mktemp(f"toy_{name}")
            start = time.perf_counter()
            proc = run_cli("train-toy", "-o", str(out), *TOY_RUNS[name])
            elapsed = time.perf_counter() - start
            assert proc.returncode == 0, proc.stderr
            cache[name] = (out, proc.stdout, elapsed)
        return cache[name]

    return get
