import numpy as np
import pytest

from app.core.codebook import fit_codebook
from app.core.descriptor_store import synth_descriptors


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_set():
    """8 clusters x 50 rows in 16 dimensions"""
    return synth_descriptors(n_clusters=8, per_cluster=50, dim=16, spread=0.1, seed=3)


@pytest.fixture
def small_codebook(small_set):
    return fit_codebook(small_set, M=4, K=8, iters=15, seed=0)
