import numpy as np
import pytest

from matfuse.core import BinaryMask, ImageRGB


def block_image(seed: int = 7, h: int = 64, w: int = 64) -> ImageRGB:
    """Random image constant on 8x8 blocks, so the toy codec round-trips it."""
    rng = np.random.default_rng(seed)
    grid = rng.uniform(0.05, 0.95, (h // 8, w // 8, 3))
    return ImageRGB(np.repeat(np.repeat(grid, 8, axis=0), 8, axis=1))


def square_mask(h: int = 64, w: int = 64, lo: int = 16, hi: int = 48) -> BinaryMask:
    values = np.zeros((h, w), dtype=np.uint8)
    values[lo:hi, lo:hi] = 1
    return BinaryMask(values)


@pytest.fixture
def toy_backend():
    from matfuse.denoiser import make_toy_backend

    return make_toy_backend(seed=0)
