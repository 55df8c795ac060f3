import numpy as np
import pytest

from layerseg_lab.core.nets import NetConfig
from layerseg_lab.engine.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with precision(64):
        yield


@pytest.fixture
def tiny_config():
    """Reduced width network: 3 classes, 8x8 patches, one pooling level."""
    return NetConfig(
        patch_height=8, patch_width=8, num_classes=3, num_boundaries=2, base_channels=2, levels=1, rnet_head_channels=2
    )


@pytest.fixture
def small_config():
    """Full class count on 16x16 patches, for training and pipeline tests."""
    return NetConfig(
        patch_height=16, patch_width=16, num_classes=10, num_boundaries=9, base_channels=4, levels=2, rnet_head_channels=2
    )


def random_stacked_mask(rng, num_classes, height, width):
    """Column-wise non-decreasing labels, some classes absent in some columns."""
    t = rng.integers(0, height // 2, size=(num_classes - 1, width)).astype(np.float64)
    t *= rng.random(t.shape) > 0.2
    b = np.minimum(np.cumsum(t, axis=0), height)
    rows = np.arange(height)[None, :, None]
    return (b[:, None, :] <= rows).sum(axis=0)
