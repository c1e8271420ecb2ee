import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ovdist.data import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    """A small synthetic dataset shared by integration tests."""
    root = tmp_path_factory.mktemp("tinydata")
    cfg = SyntheticConfig(train_count=24, test_count=8, image_size=64)
    generate_synthetic(cfg, root, seed=11)
    return root


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
