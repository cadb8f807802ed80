import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from voladapt.volume import Mask3D, Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, dims):
    return Volume3D(rng.random(dims, dtype=np.float32))


def random_mask(rng, dims, density=0.3):
    return Mask3D((rng.random(dims) < density).astype(np.uint8))


def sphere_mask(dims, center, radius):
    """Ellipsoid-free solid sphere; per-slice disks fill ~pi/4 of their boxes."""
    grid = np.indices(dims)
    dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    return Mask3D((dist2 <= radius ** 2).astype(np.uint8))
