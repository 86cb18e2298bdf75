"""Procedural T1/FLAIR brain phantoms with known tissue and lesion masks.

The brain is a jittered ellipsoid with a CSF rim, a GM shell, a WM core and
two CSF ventricles. Lesions are ellipsoids placed well inside WM whose
contrast fades from core to edge: bright on FLAIR, dark on T1.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import InvalidConfigError, PlacementError
from .volume import BinaryMask3D, Geometry, Volume3D

TISSUES = ("background", "csf", "gm", "wm")


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (64, 64, 10)
    spacing: tuple = (1.0, 1.0, 2.0)
    # ellipsoid semi-axes in mm before per-subject jitter
    brain_radii_mm: tuple = (29.0, 25.0, 14.0)
    radius_jitter: float = 0.06
    center_jitter_mm: float = 1.5
    t1_means: dict = field(default_factory=lambda: dict(background=0.0, csf=30.0, gm=75.0, wm=115.0))
    t1_stds: dict = field(default_factory=lambda: dict(background=0.0, csf=4.0, gm=5.0, wm=5.0))
    flair_means: dict = field(default_factory=lambda: dict(background=0.0, csf=25.0, gm=100.0, wm=78.0))
    flair_stds: dict = field(default_factory=lambda: dict(background=0.0, csf=4.0, gm=6.0, wm=5.0))
    lesion_count: tuple = (3, 6)
    lesion_radius_mm: tuple = (2.0, 4.0)
    lesion_offset_flair: float = 60.0
    lesion_offset_t1: float = -45.0
    lesion_amplitude: tuple = (0.9, 1.3)
    blur_vox: float = 0.6
    max_retries: int = 200

    def __post_init__(self):
        for m in (self.t1_means, self.flair_means):
            if set(m) != set(TISSUES):
                raise InvalidConfigError(f"tissue tables need keys {TISSUES}")
        if not self.t1_means["csf"] < self.t1_means["gm"] < self.t1_means["wm"]:
            raise InvalidConfigError("T1 means must order CSF < GM < WM")
        if not self.flair_means["csf"] < self.flair_means["wm"] < self.flair_means["gm"]:
            raise InvalidConfigError("FLAIR means must order CSF < WM < GM")
        if self.lesion_offset_flair <= 0 or self.lesion_offset_t1 >= 0:
            raise InvalidConfigError("lesions must be FLAIR-hyperintense and T1-hypointense")
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise InvalidConfigError("invalid lesion_count range")

    def healthy(self) -> "PhantomSpec":
        return replace(self, lesion_count=(0, 0))

    def geometry(self) -> Geometry:
        shape = np.asarray(self.shape)
        spacing = np.asarray(self.spacing, dtype=np.float64)
        # world origin at the grid centre so different subjects overlap
        return Geometry.from_spacing(self.shape, spacing, -(shape - 1) / 2.0 * spacing)


@dataclass(frozen=True, eq=False)
class Phantom:
    t1: Volume3D
    flair: Volume3D
    lesion: BinaryMask3D
    gm: BinaryMask3D
    wm: BinaryMask3D
    brain: BinaryMask3D


def _world_grid(geom: Geometry):
    idx = np.indices(geom.shape, dtype=np.float64).reshape(3, -1)
    world = geom.affine[:3, :3] @ idx + geom.affine[:3, 3:4]
    return world.reshape((3, *geom.shape))


def make_phantom(spec: PhantomSpec = PhantomSpec(), seed: int = 0) -> Phantom:
    rng = np.random.default_rng(seed)
    geom = spec.geometry()
    xyz = _world_grid(geom)
    radii = np.asarray(spec.brain_radii_mm) * (1 + rng.uniform(-spec.radius_jitter, spec.radius_jitter, 3))
    center = rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, 3)
    center[2] = 0.0
    rel = (xyz - center[:, None, None, None]) / radii[:, None, None, None]
    rho = np.sqrt((rel ** 2).sum(0))

    brain = rho <= 1.0
    gm = (rho > 0.72) & (rho <= 0.9)
    csf = brain & ~gm & (rho > 0.9)
    wm = rho <= 0.72
    for side in (-1, 1):
        vc = center + np.array([side * 0.22 * radii[0], 0.05 * radii[1], 0.0])
        vr = radii * np.array([0.1, 0.3, 0.6])
        vent = (((xyz - vc[:, None, None, None]) / vr[:, None, None, None]) ** 2).sum(0) <= 1.0
        csf |= vent & wm
        wm &= ~vent

    lesion, lesion_profile = _place_lesions(spec, rng, xyz, wm, geom)

    volumes = []
    for means, stds, offset in ((spec.t1_means, spec.t1_stds, spec.lesion_offset_t1),
                                (spec.flair_means, spec.flair_stds, spec.lesion_offset_flair)):
        base = np.zeros(geom.shape)
        sd = np.zeros(geom.shape)
        for name, sel in (("csf", csf), ("gm", gm), ("wm", wm)):
            base[sel] = means[name]
            sd[sel] = stds[name]
        base += offset * lesion_profile
        if spec.blur_vox > 0:
            base = ndimage.gaussian_filter(base, (spec.blur_vox, spec.blur_vox, 0))
        img = base + sd * rng.standard_normal(geom.shape)
        img[~brain] = 0.0
        volumes.append(Volume3D(np.clip(img, 0.0, None), geometry=geom))

    mk = lambda a: BinaryMask3D(a, geometry=geom)
    return Phantom(volumes[0], volumes[1], mk(lesion), mk(gm), mk(wm), mk(brain))


def _place_lesions(spec, rng, xyz, wm, geom):
    lesion = np.zeros(geom.shape, bool)
    profile = np.zeros(geom.shape)
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    if n == 0:
        return lesion, profile
    depth = ndimage.distance_transform_edt(wm, sampling=geom.spacing)
    placed = []
    for _ in range(n):
        for _attempt in range(spec.max_retries):
            r = rng.uniform(*spec.lesion_radius_mm)
            axes = r * rng.uniform(0.8, 1.2, 3)
            axes[2] = max(axes[2], geom.spacing[2])
            candidates = np.argwhere(depth > r + 1.5)
            if len(candidates) == 0:
                break
            c_idx = candidates[rng.integers(len(candidates))]
            c = xyz[(slice(None), *c_idx)]
            if any(np.linalg.norm(c - pc) < 1.2 * (r + pr) + 3.0 for pc, pr in placed):
                continue
            rel = (xyz - c[:, None, None, None]) / axes[:, None, None, None]
            rr = (rel ** 2).sum(0)
            blob = (rr <= 1.0) & wm
            if not blob.any():
                continue
            amp = rng.uniform(*spec.lesion_amplitude)
            profile = np.where(blob, np.maximum(profile, amp * (1.0 - 0.4 * rr)), profile)
            lesion |= blob
            placed.append((c, r))
            break
        else:
            raise PlacementError(f"could not place lesion {len(placed) + 1} after {spec.max_retries} tries")
    if len(placed) < n:
        raise PlacementError(f"placed only {len(placed)} of {n} lesions")
    return lesion, profile
