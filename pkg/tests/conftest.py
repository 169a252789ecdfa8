import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("STEAM_DATA_DIR", ROOT / "data" / "mnist-desk"))


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def data_dir():
    if not (DATA_DIR / "train-images-idx3-ubyte.gz").exists() and not (DATA_DIR / "train-images-idx3-ubyte").exists():
        pytest.skip(f"no IDX dataset in {DATA_DIR}")
    return DATA_DIR


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS, key=str):
            terminalreporter.write_line(RESULTS[key])
