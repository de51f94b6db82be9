import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_amplitude(rng, h=32, w=32, low=0.5, high=2.0):
    """Strictly positive random test image."""
    return rng.uniform(low, high, size=(h, w)).astype(np.float32)
