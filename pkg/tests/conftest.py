"""
Shared pytest setup.
"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.datacube import generate_synthetic_scene  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks (enable with --runslow)")


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


@pytest.fixture(scope="session")
def small_scene():
    """16 x 16 x 4 synthetic scene with 3 classes."""
    return generate_synthetic_scene(16, 16, 4, 3, seed=5)


@pytest.fixture(scope="session")
def acceptance_pipeline():
    """Joint-training settings pinned for the 48 x 48 x 8 synthetic acceptance scene."""
    return dict(eta=0.02, epochs=100, batch=32, init="binary", project_every_step=True,
                aperture_eta=0.2, refine_epochs=10)
