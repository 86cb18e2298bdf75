"""FLAIR thresholding into the approximate WMH mask and the intensity-level bank.

A threshold is ``mu_gm + gamma * sigma_gm`` with GM statistics measured on
FLAIR. Band ``i`` holds voxels with ``T_i < FLAIR <= T_{i+1}``; the last band
is open above.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (EmptyInputError, EstimationFailedError, InsufficientSampleError,
                     InvalidConfigError)
from .volume import BinaryMask3D, Volume3D, check_aligned

DEFAULT_GAMMAS = (0.5, 0.8, 1.1, 1.4, 1.7, 2.1, 2.4, 2.7)
MIN_GM_VOXELS = 10


@dataclass(frozen=True)
class TissueStats:
    mu_gm: float
    sigma_gm: float

    def __post_init__(self):
        if not (np.isfinite(self.mu_gm) and np.isfinite(self.sigma_gm)) or self.sigma_gm <= 0:
            raise InvalidConfigError(f"invalid GM statistics: mu={self.mu_gm}, sigma={self.sigma_gm}")


def threshold_for(stats: TissueStats, gamma: float) -> float:
    return stats.mu_gm + gamma * stats.sigma_gm


def estimate_gm_stats(flair: Volume3D, brain: BinaryMask3D, gm_mask: BinaryMask3D | None = None,
                      seed: int = 0, max_iter: int = 500) -> TissueStats:
    """GM mean/std on FLAIR.

    Uses ``gm_mask`` directly when given (sample std, ddof=1); otherwise fits a
    3-class 1-D Gaussian mixture to brain intensities and takes the component
    with the middle mean.
    """
    check_aligned(flair, brain)
    if not brain.data.any():
        raise EmptyInputError("brain mask is empty")
    if gm_mask is not None:
        check_aligned(flair, gm_mask)
        values = flair.data[gm_mask.data]
        if values.size < MIN_GM_VOXELS:
            raise InsufficientSampleError(
                f"GM mask has {values.size} voxels, need at least {MIN_GM_VOXELS}")
        return TissueStats(float(values.mean()), float(values.std(ddof=1)))

    from sklearn.mixture import GaussianMixture

    values = flair.data[brain.data].reshape(-1, 1)
    if values.shape[0] < 3 * MIN_GM_VOXELS:
        raise InsufficientSampleError("too few brain voxels for a 3-class mixture fit")
    gmm = GaussianMixture(n_components=3, covariance_type="full", max_iter=max_iter,
                          random_state=seed, n_init=1, init_params="kmeans")
    try:
        gmm.fit(values)
    except Exception as exc:
        raise EstimationFailedError(f"mixture fit failed: {exc}") from exc
    if not gmm.converged_:
        raise EstimationFailedError(f"mixture fit did not converge in {max_iter} iterations")
    means = gmm.means_[:, 0]
    mid = int(np.argsort(means)[1])
    return TissueStats(float(means[mid]), float(np.sqrt(gmm.covariances_[mid, 0, 0])))


@dataclass(frozen=True, eq=False)
class IntensityLevelBank:
    """The approximate WMH mask plus one mask per intensity band."""

    gammas: tuple
    thresholds: tuple
    masks: tuple  # BinaryMask3D per band, in gamma order
    wmh_mask: BinaryMask3D
    stats: TissueStats | None = None

    def __post_init__(self):
        if len(self.masks) != len(self.gammas) or len(self.thresholds) != len(self.gammas):
            raise InvalidConfigError("bank needs one mask and one threshold per gamma")
        check_aligned(self.wmh_mask, *self.masks)

    @property
    def geometry(self):
        return self.wmh_mask.geometry

    def stack(self) -> np.ndarray:
        """Bands as a (n_bands, nx, ny, nz) float32 array."""
        return np.stack([m.data for m in self.masks]).astype(np.float32)

    def replace_masks(self, band_arrays) -> "IntensityLevelBank":
        """New bank with the given band arrays; the WMH mask becomes their union."""
        masks = tuple(self.wmh_mask.with_data(np.asarray(a, bool)) for a in band_arrays)
        union = np.zeros(self.wmh_mask.shape, bool)
        for m in masks:
            union |= m.data
        return IntensityLevelBank(self.gammas, self.thresholds, masks,
                                  self.wmh_mask.with_data(union), self.stats)

    def metadata(self) -> dict:
        meta = {"gammas": list(self.gammas), "thresholds": list(self.thresholds),
                "band_voxels": [m.count for m in self.masks], "wmh_voxels": self.wmh_mask.count}
        if self.stats is not None:
            meta["mu_gm"] = self.stats.mu_gm
            meta["sigma_gm"] = self.stats.sigma_gm
        return meta


def _validate_gammas(gammas):
    gammas = tuple(float(g) for g in gammas)
    if len(gammas) < 1 or not all(np.isfinite(gammas)):
        raise InvalidConfigError("gammas must be a non-empty list of finite values")
    if any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise InvalidConfigError(f"gammas must be strictly increasing, got {gammas}")
    return gammas


def build_bank(flair: Volume3D, stats: TissueStats, brain: BinaryMask3D,
               gammas=DEFAULT_GAMMAS) -> IntensityLevelBank:
    gammas = _validate_gammas(gammas)
    check_aligned(flair, brain)
    if not brain.data.any():
        raise EmptyInputError("brain mask is empty")
    thresholds = tuple(threshold_for(stats, g) for g in gammas)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise InvalidConfigError("thresholds are not strictly increasing")
    f = flair.data
    inside = brain.data
    masks = []
    for i, lo in enumerate(thresholds):
        band = inside & (f > lo)
        if i + 1 < len(thresholds):
            band &= f <= thresholds[i + 1]
        masks.append(brain.with_data(band))
    wmh = brain.with_data(inside & (f > thresholds[0]))
    return IntensityLevelBank(gammas, thresholds, tuple(masks), wmh, stats)


def save_bank(bank: IntensityLevelBank, out_dir) -> Path:
    """Write ``wmh.nii.gz``, ``il_1..il_n.nii.gz`` and ``bank.json``."""
    from .nifti import save_mask

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_mask(bank.wmh_mask, out_dir / "wmh.nii.gz")
    for i, m in enumerate(bank.masks, start=1):
        save_mask(m, out_dir / f"il_{i}.nii.gz")
    (out_dir / "bank.json").write_text(json.dumps(bank.metadata(), indent=2) + "\n")
    return out_dir


def load_bank(bank_dir) -> IntensityLevelBank:
    from .nifti import load_mask

    bank_dir = Path(bank_dir)
    meta = json.loads((bank_dir / "bank.json").read_text())
    masks = tuple(load_mask(bank_dir / f"il_{i}.nii.gz") for i in range(1, len(meta["gammas"]) + 1))
    stats = None
    if "mu_gm" in meta:
        stats = TissueStats(meta["mu_gm"], meta["sigma_gm"])
    return IntensityLevelBank(tuple(meta["gammas"]), tuple(meta["thresholds"]), masks,
                              load_mask(bank_dir / "wmh.nii.gz"), stats)
