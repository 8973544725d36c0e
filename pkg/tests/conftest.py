import numpy as np
import pytest

from lenslab import codec
from lenslab.numerics import RngState


@pytest.fixture
def geometry():
    return codec.PatchGeometry(4, 8, 8, 4)


@pytest.fixture
def small_geometry():
    return codec.PatchGeometry(2, 4, 4, 2)


@pytest.fixture
def basis(geometry):
    return codec.random_basis(geometry, 32, RngState(0))


def random_symmetric(d: int, seed: int) -> np.ndarray:
    g = RngState(seed).normal((d, d))
    return 0.5 * (g + g.T)
