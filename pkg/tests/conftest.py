import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
# Sweeps used by the acceptance suite live here; they are resumable, so a
# second run only re-reads the finished rows.
RESULTS = Path(os.environ.get("HIERSPEC_RESULTS", ROOT / "results"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the slow acceptance criteria")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("HIERSPEC_RUNSLOW"):
        return
    skip = pytest.mark.skip(reason="slow: needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def results_dir():
    RESULTS.mkdir(parents=True, exist_ok=True)
    return RESULTS
