import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

from histm.model import HiSTMConfig


@pytest.fixture
def toy_config():
    """Smallest non-degenerate model: fast enough for finite differences."""
    return HiSTMConfig(window_len=2, kernel_size=3, channels=4, num_layers=1,
                       mlp_hidden=8, mamba_d_state=4, mamba_d_conv=2,
                       mamba_expand=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
