"""NIfTI-1 and transform-file I/O."""
from __future__ import annotations

from pathlib import Path

import nibabel as nib
import numpy as np

from .errors import InvalidTransformError, MalformedImageError
from .volume import BinaryMask3D, Geometry, SpatialTransform, Volume3D


def _load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types for bad files
        raise MalformedImageError(f"cannot read NIfTI {path}: {exc}") from exc
    return img, data


def load_volume(path) -> Volume3D:
    img, data = _load(path)
    data = np.squeeze(data) if data.ndim > 3 else data
    if data.ndim != 3:
        raise MalformedImageError(f"{path}: expected a 3-D image, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise MalformedImageError(f"{path}: image contains NaN/Inf")
    return Volume3D(data, affine=img.affine, header=img.header.copy())


def load_mask(path) -> BinaryMask3D:
    img, data = _load(path)
    data = np.squeeze(data) if data.ndim > 3 else data
    if data.ndim != 3:
        raise MalformedImageError(f"{path}: expected a 3-D mask, got shape {data.shape}")
    return BinaryMask3D(data > 0, affine=img.affine, header=img.header.copy())


def save_volume(volume: Volume3D, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = volume.header.copy() if volume.header is not None else None
    data = volume.data
    if header is not None:
        dtype = header.get_data_dtype()
        if np.issubdtype(dtype, np.integer) and not np.array_equal(data, np.round(data)):
            header.set_data_dtype(np.float32)
            dtype = np.float32
        img = nib.Nifti1Image(data.astype(dtype), volume.affine, header)
    else:
        img = nib.Nifti1Image(data.astype(np.float32), volume.affine)
        img.header.set_xyzt_units("mm")
    nib.save(img, str(path))
    return path


def save_mask(mask: BinaryMask3D, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(mask.data.astype(np.uint8), mask.affine)
    img.header.set_data_dtype(np.uint8)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))
    return path


def load_affine_text(path) -> np.ndarray:
    """Read a 4x4 row-major world-coordinate matrix (whitespace separated)."""
    try:
        mat = np.loadtxt(path, dtype=np.float64)
    except ValueError as exc:
        raise InvalidTransformError(f"{path}: not a numeric matrix") from exc
    if mat.shape != (4, 4):
        raise InvalidTransformError(f"{path}: expected 4x4 matrix, got {mat.shape}")
    return mat


def save_affine_text(matrix, path) -> Path:
    path = Path(path)
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), fmt="%.17g")
    return path


def load_transform(affine_path=None, displacement_path=None, target: Geometry | None = None):
    """Build a SpatialTransform from an affine text file and/or a 3-component
    displacement NIfTI (mm) defined on the target grid."""
    affine = load_affine_text(affine_path) if affine_path else None
    disp = None
    if displacement_path:
        img, data = _load(displacement_path)
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 5 and data.shape[3] == 1:
            data = data[:, :, :, 0, :]
        if data.ndim != 4 or data.shape[3] != 3:
            raise InvalidTransformError(f"{displacement_path}: expected (nx, ny, nz, 3) field")
        if target is not None and data.shape[:3] != target.shape:
            raise InvalidTransformError("displacement field is not on the target grid")
        disp = data
    return SpatialTransform(affine, disp)


def save_displacement(displacement, affine, path) -> Path:
    path = Path(path)
    disp = np.asarray(displacement, dtype=np.float32)[:, :, :, None, :]
    img = nib.Nifti1Image(disp, affine)
    img.header.set_intent("vector")
    nib.save(img, str(path))
    return path
