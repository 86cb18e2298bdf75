import numpy as np
import pytest

from lesionsynth.volume import BinaryMask3D, Geometry, Volume3D


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def geom():
    return Geometry.from_spacing((12, 10, 6), (1.0, 1.0, 2.0))


def make_volume(data, geometry=None):
    return Volume3D(data, geometry=geometry or Geometry.from_spacing(np.shape(data)))


def make_mask(data, geometry=None):
    return BinaryMask3D(np.asarray(data, bool), geometry=geometry or Geometry.from_spacing(np.shape(data)))
