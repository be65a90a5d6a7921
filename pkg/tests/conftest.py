import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ladmmnet.cassi import dual_arm  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_ops():
    """8x8x4 dual-arm system, p = q = 2 at half sampling."""
    return dual_arm((8, 8, 4), p=2, q=2, ratio=0.5, aperture_seed=3)
