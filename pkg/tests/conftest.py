import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from memdepth.config import ArchConfig  # noqa: E402
from memdepth.model import init_params  # noqa: E402


@pytest.fixture
def tiny_cfg():
    """Smallest architecture that exercises every block (16x16 inputs)."""
    return ArchConfig(token_channels=8, stride_product=8, heads=2, decoder_scales=3, memory_length=2)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=3, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
