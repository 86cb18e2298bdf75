"""Local in-painting of hyperintense regions with white-matter-like values.

Per axial slice, every 8-connected WMH region is replaced by normal draws
parameterised by the WM voxels in its first dilation ring, then the region and
its rings are Gaussian smoothed in-plane.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FillError, InvalidConfigError
from .volume import (BinaryMask3D, Volume3D, check_aligned, dilate_array, gaussian_smooth,
                     label_array)

_RING_STRUCT = np.ones((3, 3), bool)


@dataclass(frozen=True, eq=False)
class FillConfig:
    dilation_rounds: int = 2
    # None -> one voxel in-plane, none through-plane
    smoothing_sigma_mm: tuple | None = None
    rng_seed: int = 0
    wm_mask: BinaryMask3D | None = None
    # used only for the slice-wide fallback statistics; defaults to voxels > 0
    brain_mask: BinaryMask3D | None = None

    def __post_init__(self):
        if self.dilation_rounds < 1:
            raise InvalidConfigError("dilation_rounds must be >= 1")
        if self.smoothing_sigma_mm is not None and np.any(np.asarray(self.smoothing_sigma_mm) < 0):
            raise InvalidConfigError("smoothing sigma must be >= 0")


@dataclass
class FillReport:
    n_regions: int = 0
    n_filled_voxels: int = 0
    n_smoothed_voxels: int = 0
    # (slice index, region index within slice) that used slice-wide statistics
    fallbacks: list = field(default_factory=list)

    def to_dict(self):
        return {"n_regions": self.n_regions, "n_filled_voxels": self.n_filled_voxels,
                "n_smoothed_voxels": self.n_smoothed_voxels,
                "fallbacks": [list(f) for f in self.fallbacks]}

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _sigma_mm(volume: Volume3D, config: FillConfig):
    if config.smoothing_sigma_mm is None:
        sx, sy, _ = volume.spacing
        return np.array([sx, sy, 0.0])
    return np.broadcast_to(np.asarray(config.smoothing_sigma_mm, dtype=np.float64), (3,))


def fill_wmh(volume: Volume3D, wmh: BinaryMask3D, config: FillConfig = FillConfig()):
    """Return ``(filled_volume, FillReport)``.

    Ring statistics come from the unmodified input, and each region draws from
    its own generator seeded by ``(rng_seed, slice, region)``, so the result
    does not depend on processing order.
    """
    check_aligned(volume, wmh)
    for extra in (config.wm_mask, config.brain_mask):
        if extra is not None:
            check_aligned(volume, extra)
    report = FillReport()
    if not wmh.data.any():
        return volume, report

    src = volume.data
    out = src.copy()
    wmh_arr = wmh.data
    wm_arr = config.wm_mask.data if config.wm_mask is not None else None
    brain_arr = config.brain_mask.data if config.brain_mask is not None else src > 0
    rounds = config.dilation_rounds
    nx, ny, _ = src.shape

    comps = label_array(wmh_arr, "2d-8")
    zone = np.zeros(src.shape, bool)
    per_slice_index = {}
    for label, sl in enumerate(ndimage.find_objects(comps.labels), start=1):
        if sl is None:
            continue
        z = sl[2].start
        ridx = per_slice_index.get(z, 0)
        per_slice_index[z] = ridx + 1

        x0, x1 = max(sl[0].start - rounds, 0), min(sl[0].stop + rounds, nx)
        y0, y1 = max(sl[1].start - rounds, 0), min(sl[1].stop + rounds, ny)
        box = (slice(x0, x1), slice(y0, y1), z)
        region = comps.labels[box] == label
        dil1 = ndimage.binary_dilation(region, structure=_RING_STRUCT)
        dilr = dilate_array(region[:, :, None], rounds, "2d-8")[:, :, 0]
        ring1 = dil1 & ~region
        if wm_arr is not None:
            sample_sel = ring1 & wm_arr[box]
        else:
            sample_sel = ring1 & ~wmh_arr[box]
        samples = src[box][sample_sel]
        if samples.size == 0:
            fallback = brain_arr[:, :, z] & ~wmh_arr[:, :, z]
            samples = src[:, :, z][fallback]
            if samples.size == 0:
                raise FillError(f"slice {z} has no non-WMH brain voxels to sample from")
            report.fallbacks.append((int(z), ridx))
        mean = float(samples.mean())
        std = float(samples.std())
        rng = np.random.default_rng([config.rng_seed, int(z), ridx])
        draws = np.clip(rng.normal(mean, std, int(region.sum())), 0.0, None)
        target = out[box]
        target[region] = draws
        out[box] = target
        zone[box] |= dilr
        report.n_regions += 1
        report.n_filled_voxels += int(region.sum())

    report.n_smoothed_voxels = int(zone.sum())
    filled = volume.with_data(out)
    filled = gaussian_smooth(filled, _sigma_mm(volume, config), wmh.with_data(zone))
    return filled, report
