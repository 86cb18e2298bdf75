"""Geometry-aware 3-D volumes and masks, plus the grid operations shared by
every pipeline stage: resampling, connected components, dilation, masked
Gaussian smoothing and brain-percentile normalisation.

Arrays are indexed ``(x, y, z)``; ``z`` is the slice axis. The 4x4 affine maps
voxel indices to world millimetres, as in NIfTI.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import (DegenerateRangeError, EmptyInputError, GeometryMismatchError,
                     InvalidConfigError, InvalidTransformError)

GEOMETRY_RTOL = 1e-6

CONNECTIVITY = ("2d-8", "3d-26")


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_affine(affine, what="affine"):
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
        raise InvalidTransformError(f"{what} must be a finite 4x4 matrix")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise InvalidTransformError(f"{what} is not invertible")
    return affine


@dataclass(frozen=True, eq=False)
class Geometry:
    """Grid shape plus voxel-to-world affine."""

    shape: tuple
    affine: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise InvalidConfigError(f"grid shape must be three positive ints, got {self.shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "affine", _frozen(_check_affine(self.affine)))

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def matches(self, other: "Geometry", rtol: float = GEOMETRY_RTOL) -> bool:
        if self.shape != other.shape:
            return False
        scale = max(1.0, float(np.abs(self.affine).max()))
        return bool(np.all(np.abs(self.affine - other.affine) <= rtol * scale))

    @classmethod
    def from_spacing(cls, shape, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        affine = np.diag([*map(float, spacing), 1.0])
        affine[:3, 3] = origin
        return cls(tuple(shape), affine)


class _Grid:
    """Shared behaviour of volumes and masks: an immutable array on a geometry."""

    __slots__ = ("data", "geometry", "header")

    def __init__(self, data, affine=None, header=None, geometry=None):
        data = self._coerce(np.asarray(data))
        if data.ndim != 3:
            raise InvalidConfigError(f"expected a 3-D array, got shape {data.shape}")
        if geometry is None:
            geometry = Geometry(data.shape, np.eye(4) if affine is None else affine)
        elif geometry.shape != data.shape:
            raise GeometryMismatchError(f"data shape {data.shape} != geometry {geometry.shape}")
        self.data = _frozen(data)
        self.geometry = geometry
        # source NIfTI header, kept only so untouched volumes round-trip exactly
        self.header = header

    @staticmethod
    def _coerce(data):
        return data

    @property
    def shape(self):
        return self.geometry.shape

    @property
    def affine(self):
        return self.geometry.affine

    @property
    def spacing(self):
        return self.geometry.spacing

    def with_data(self, data):
        return type(self)(data, geometry=self.geometry, header=self.header)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, spacing={tuple(np.round(self.spacing, 4))})"


class Volume3D(_Grid):
    """Scalar intensity volume (float64, finite)."""

    __slots__ = ()

    @staticmethod
    def _coerce(data):
        data = data.astype(np.float64, copy=False)
        if not np.all(np.isfinite(data)):
            raise InvalidConfigError("volume contains NaN or Inf")
        return data


class BinaryMask3D(_Grid):
    """Boolean voxel mask."""

    __slots__ = ()

    @staticmethod
    def _coerce(data):
        if data.dtype != bool:
            vals = np.unique(data)
            if not np.all(np.isin(vals, (0, 1))):
                raise InvalidConfigError("mask data must be binary {0, 1}")
            data = data.astype(bool)
        return data

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def __and__(self, other):
        check_aligned(self, other)
        return self.with_data(self.data & other.data)

    def __or__(self, other):
        check_aligned(self, other)
        return self.with_data(self.data | other.data)

    def __sub__(self, other):
        check_aligned(self, other)
        return self.with_data(self.data & ~other.data)

    @classmethod
    def empty_like(cls, grid: _Grid):
        return cls(np.zeros(grid.shape, bool), geometry=grid.geometry)


def check_aligned(*grids):
    """Raise GeometryMismatchError unless every grid shares one geometry."""
    ref = grids[0].geometry if isinstance(grids[0], _Grid) else grids[0]
    for g in grids[1:]:
        geom = g.geometry if isinstance(g, _Grid) else g
        if not ref.matches(geom):
            raise GeometryMismatchError(
                f"grid geometry mismatch: {ref.shape} vs {geom.shape} (or differing affines)")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

class SpatialTransform:
    """A source-to-target world transform.

    ``affine`` maps source world points onto the target. The optional dense
    ``displacement`` field lives on the target grid (shape ``target + (3,)``,
    mm) and is added to target world points before pulling back through the
    inverse affine:  ``x_source = affine^-1 (y + displacement(y))``.
    """

    def __init__(self, affine=None, displacement=None):
        self.affine = _frozen(_check_affine(np.eye(4) if affine is None else affine,
                                            "transform affine"))
        if displacement is not None:
            displacement = np.asarray(displacement, dtype=np.float64)
            if displacement.ndim != 4 or displacement.shape[-1] != 3:
                raise InvalidTransformError("displacement field must have shape (nx, ny, nz, 3)")
            if not np.all(np.isfinite(displacement)):
                raise InvalidTransformError("displacement field is not finite")
            displacement = _frozen(displacement)
        self.displacement = displacement

    @classmethod
    def identity(cls):
        return cls()

    @property
    def is_identity(self) -> bool:
        return self.displacement is None and np.array_equal(self.affine, np.eye(4))


def _source_coords(transform: SpatialTransform, source: Geometry, target: Geometry):
    """Continuous source voxel coordinates (3, N) for every target voxel."""
    if transform.displacement is not None and transform.displacement.shape[:3] != target.shape:
        raise InvalidTransformError(
            f"displacement grid {transform.displacement.shape[:3]} != target {target.shape}")
    idx = np.indices(target.shape, dtype=np.float64).reshape(3, -1)
    world = target.affine[:3, :3] @ idx + target.affine[:3, 3:4]
    if transform.displacement is not None:
        world = world + transform.displacement.reshape(-1, 3).T
    pull = np.linalg.inv(source.affine) @ np.linalg.inv(transform.affine)
    coords = pull[:3, :3] @ world + pull[:3, 3:4]
    # absorb matrix-inversion round-off so exact lattice points stay exact
    return np.round(coords, 9)


def resample(source: Volume3D, transform: SpatialTransform, target_grid: Geometry) -> Volume3D:
    """Trilinear resampling of ``source`` onto ``target_grid``; outside -> 0."""
    if transform.is_identity and source.geometry.matches(target_grid):
        return Volume3D(source.data, geometry=target_grid)
    coords = _source_coords(transform, source.geometry, target_grid)
    values = _kernels.trilinear_sample(np.ascontiguousarray(source.data), coords)
    return Volume3D(values.reshape(target_grid.shape), geometry=target_grid)


def resample_mask(source: BinaryMask3D, transform: SpatialTransform,
                  target_grid: Geometry) -> BinaryMask3D:
    """Nearest-neighbour resampling of a mask; the result is strictly binary."""
    if transform.is_identity and source.geometry.matches(target_grid):
        return BinaryMask3D(source.data, geometry=target_grid)
    coords = _source_coords(transform, source.geometry, target_grid)
    values = _kernels.nearest_sample(np.ascontiguousarray(source.data, dtype=np.uint8), coords)
    return BinaryMask3D(values.reshape(target_grid.shape).astype(bool), geometry=target_grid)


# --------------------------------------------------------------------------
# morphology
# --------------------------------------------------------------------------

def structure_for(connectivity: str) -> np.ndarray:
    if connectivity == "3d-26":
        return np.ones((3, 3, 3), bool)
    if connectivity == "2d-8":
        s = np.zeros((3, 3, 3), bool)
        s[:, :, 1] = True
        return s
    raise InvalidConfigError(f"connectivity must be one of {CONNECTIVITY}, got {connectivity!r}")


class Components(NamedTuple):
    labels: np.ndarray  # int32, 0 = background, 1..count
    count: int

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]


def label_array(arr: np.ndarray, connectivity: str) -> Components:
    labels, n = ndimage.label(arr, structure=structure_for(connectivity))
    return Components(labels.astype(np.int32), int(n))


def connected_components(mask: BinaryMask3D, connectivity: str = "3d-26") -> Components:
    """Label maximal connected sets. ``2d-8`` never links voxels across slices."""
    return label_array(mask.data, connectivity)


def dilate_array(arr: np.ndarray, rounds: int, connectivity: str) -> np.ndarray:
    if rounds < 0:
        raise InvalidConfigError("dilation rounds must be >= 0")
    if rounds == 0 or not arr.any():
        return arr.copy()
    # scipy treats iterations=0 as "until stable", hence the guard above
    return ndimage.binary_dilation(arr, structure=structure_for(connectivity), iterations=rounds)


def dilate(mask: BinaryMask3D, rounds: int, connectivity: str = "3d-26") -> BinaryMask3D:
    return mask.with_data(dilate_array(mask.data, rounds, connectivity))


# --------------------------------------------------------------------------
# smoothing and normalisation
# --------------------------------------------------------------------------

def gaussian_smooth(volume: Volume3D, sigma_mm, region: BinaryMask3D) -> Volume3D:
    """Gaussian-filter the whole grid but write results only inside ``region``.

    ``sigma_mm`` is a scalar or per-axis triple; zero on an axis means no
    smoothing along it.
    """
    check_aligned(volume, region)
    sigma_mm = np.broadcast_to(np.asarray(sigma_mm, dtype=np.float64), (3,))
    if np.any(sigma_mm < 0):
        raise InvalidConfigError("sigma must be >= 0")
    if not region.data.any() or not np.any(sigma_mm > 0):
        return volume
    sigma_vox = sigma_mm / volume.spacing
    smoothed = ndimage.gaussian_filter(volume.data, sigma=sigma_vox, mode="nearest")
    out = np.where(region.data, smoothed, volume.data)
    return volume.with_data(out)


@dataclass(frozen=True)
class NormalizationParams:
    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise DegenerateRangeError(f"normalisation range is empty: low={self.low} high={self.high}")


def normalize(volume: Volume3D, brain: BinaryMask3D, p_lo: float = 1.0, p_hi: float = 99.0):
    """Clip to brain percentiles and map linearly onto [0, 1]."""
    check_aligned(volume, brain)
    if not brain.data.any():
        raise EmptyInputError("brain mask is empty")
    if not p_lo < p_hi:
        raise InvalidConfigError("p_lo must be < p_hi")
    low, high = np.percentile(volume.data[brain.data], [p_lo, p_hi])
    if not high > low:
        raise DegenerateRangeError("intensity is constant inside the brain mask")
    params = NormalizationParams(float(low), float(high))
    return apply_normalization(volume, params), params


def apply_normalization(volume: Volume3D, params: NormalizationParams) -> Volume3D:
    scaled = (volume.data - params.low) / (params.high - params.low)
    return volume.with_data(np.clip(scaled, 0.0, 1.0))


def denormalize(volume: Volume3D, params: NormalizationParams) -> Volume3D:
    return volume.with_data(volume.data * (params.high - params.low) + params.low)
