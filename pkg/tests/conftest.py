import numpy as np
import pytest
import torch

# single-threaded keeps kernels deterministic and avoids oversubscription
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def centered_disk(size, radius, value=1.0, dtype=np.float64):
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    return (((yy - c) ** 2 + (xx - c) ** 2) <= radius ** 2).astype(dtype) * value


def smooth_blob(size, radius=None, amplitude=0.8):
    """Cosine-tapered disk: band-limited enough for near-exact FBP recovery."""
    if radius is None:
        radius = size * 0.3
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    return amplitude * 0.5 * (1.0 + np.cos(np.pi * np.clip(r / radius, 0.0, 1.0)))
