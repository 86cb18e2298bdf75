"""Image-similarity and lesion segmentation/detection metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import EmptyInputError, InvalidConfigError
from .volume import BinaryMask3D, Volume3D, check_aligned, connected_components

NA = None  # marker for an undefined ratio (e.g. sensitivity with no GT lesions)


@dataclass(frozen=True)
class SSIMParams:
    k1: float = 0.01
    k2: float = 0.03
    # None -> joint intensity range of both images over the region
    dynamic_range: float | None = None
    # cube side in voxels; 0 means a single global SSIM over the region
    window: int = 0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise InvalidConfigError("k1 and k2 must be positive")
        if self.dynamic_range is not None and self.dynamic_range <= 0:
            raise InvalidConfigError("dynamic range must be positive")
        if self.window < 0:
            raise InvalidConfigError("window must be >= 0")

    def constants(self, dynamic_range: float):
        return (self.k1 * dynamic_range) ** 2, (self.k2 * dynamic_range) ** 2


def _region_values(generated, real, region, min_voxels=1):
    check_aligned(generated, real, region)
    n = int(region.data.sum())
    if n < min_voxels:
        raise EmptyInputError(f"region has {n} voxels, need at least {min_voxels}")
    return generated.data[region.data], real.data[region.data]


def mse(generated: Volume3D, real: Volume3D, region: BinaryMask3D) -> float:
    g, r = _region_values(generated, real, region)
    return float(np.mean((g - r) ** 2))


def signed_mean_error(generated: Volume3D, real: Volume3D, region: BinaryMask3D) -> float:
    """Mean of ``G - R`` without squaring; a bias diagnostic."""
    g, r = _region_values(generated, real, region)
    return float(np.mean(g - r))


def _ssim_formula(mg, mr, vg, vr, cov, c1, c2):
    return ((2 * mg * mr + c1) * (2 * cov + c2)) / ((mg * mg + mr * mr + c1) * (vg + vr + c2))


def ssim(generated: Volume3D, real: Volume3D, region: BinaryMask3D,
         params: SSIMParams = SSIMParams()) -> float:
    g, r = _region_values(generated, real, region, min_voxels=2)
    if params.dynamic_range is not None:
        span = params.dynamic_range
    else:
        span = float(max(g.max(), r.max()) - min(g.min(), r.min())) or 1.0
    c1, c2 = params.constants(span)
    if params.window == 0:
        mg, mr = g.mean(), r.mean()
        vg, vr = g.var(), r.var()
        cov = np.mean((g - mg) * (r - mr))
        return float(_ssim_formula(mg, mr, vg, vr, cov, c1, c2))
    centers = np.argwhere(region.data)
    values = _kernels.windowed_ssim(generated.data, real.data, centers, params.window // 2, c1, c2)
    return float(values.mean())


@dataclass(frozen=True)
class SimilarityReport:
    region_name: str
    mse: float
    ssim: float
    n_voxels: int


def non_background_region(real: Volume3D, brain: BinaryMask3D | None = None) -> BinaryMask3D:
    """Brain mask when available, otherwise voxels above zero in the real image."""
    if brain is not None:
        check_aligned(real, brain)
        return brain
    return BinaryMask3D(real.data > 0, geometry=real.geometry)


def similarity(generated: Volume3D, real: Volume3D, region: BinaryMask3D, region_name: str,
               params: SSIMParams = SSIMParams()) -> SimilarityReport:
    return SimilarityReport(region_name, mse(generated, real, region),
                            ssim(generated, real, region, params), int(region.data.sum()))


# --------------------------------------------------------------------------
# segmentation
# --------------------------------------------------------------------------

def dsc(seg: BinaryMask3D, gt: BinaryMask3D):
    """Dice with voxel counts; two empty masks score 1.0."""
    check_aligned(seg, gt)
    s, g = seg.data, gt.data
    tp = int(np.count_nonzero(s & g))
    fp = int(np.count_nonzero(s & ~g))
    fn = int(np.count_nonzero(~s & g))
    denom = 2 * tp + fp + fn
    value = 1.0 if denom == 0 else 2 * tp / denom
    return value, {"tp_s": tp, "fp_s": fp, "fn_s": fn}


def lesion_detection(seg: BinaryMask3D, gt: BinaryMask3D, connectivity: str = "3d-26",
                     min_overlap_voxels: int = 1):
    """Lesion-wise sensitivity and precision over connected components.

    Returns ``(sensitivity, precision, counts)``; a ratio with a zero
    denominator is reported as ``NA`` (None).
    """
    check_aligned(seg, gt)
    if min_overlap_voxels < 1:
        raise InvalidConfigError("min_overlap_voxels must be >= 1")
    gt_cc = connected_components(gt, connectivity)
    seg_cc = connected_components(seg, connectivity)
    both = (gt_cc.labels > 0) & (seg_cc.labels > 0)
    pairs = np.stack([gt_cc.labels[both], seg_cc.labels[both]])
    overlap = {}
    if pairs.size:
        keys, counts = np.unique(pairs, axis=1, return_counts=True)
        for (gl, sl), c in zip(keys.T, counts):
            overlap[(int(gl), int(sl))] = int(c)
    gt_hit = set()
    seg_hit = set()
    for (gl, sl), c in overlap.items():
        if c >= min_overlap_voxels:
            gt_hit.add(gl)
            seg_hit.add(sl)
    tp = len(gt_hit)
    fn = gt_cc.count - tp
    fp = seg_cc.count - len(seg_hit)
    sens = tp / (tp + fn) if tp + fn else NA
    # TP_d counts GT lesions; precision uses it against unmatched seg blobs
    prec = tp / (tp + fp) if tp + fp else NA
    return sens, prec, {"tp_d": tp, "fp_d": fp, "fn_d": fn,
                        "n_gt": gt_cc.count, "n_seg": seg_cc.count}


@dataclass(frozen=True)
class SegmentationScore:
    dsc: float
    sensitivity: float | None
    precision: float | None
    tp_s: int
    fp_s: int
    fn_s: int
    tp_d: int
    fp_d: int
    fn_d: int


def score_segmentation(seg: BinaryMask3D, gt: BinaryMask3D, connectivity: str = "3d-26",
                       min_overlap_voxels: int = 1) -> SegmentationScore:
    d, vc = dsc(seg, gt)
    sens, prec, dc = lesion_detection(seg, gt, connectivity, min_overlap_voxels)
    return SegmentationScore(d, sens, prec, vc["tp_s"], vc["fp_s"], vc["fn_s"],
                             dc["tp_d"], dc["fp_d"], dc["fn_d"])


# --------------------------------------------------------------------------
# CSV reports
# --------------------------------------------------------------------------

METRIC_COLUMNS = ["image_id", "region", "metric", "value", "counts"]


def _fmt(value):
    return "NA" if value is None else repr(float(value))


def similarity_rows(image_id: str, modality: str, report: SimilarityReport):
    region = f"{modality}:{report.region_name}"
    counts = f"n_voxels={report.n_voxels}"
    return [[image_id, region, "mse", _fmt(report.mse), counts],
            [image_id, region, "ssim", _fmt(report.ssim), counts]]


def segmentation_rows(image_id: str, score: SegmentationScore, region: str = "lesion"):
    vox = f"tp_s={score.tp_s};fp_s={score.fp_s};fn_s={score.fn_s}"
    les = f"tp_d={score.tp_d};fp_d={score.fp_d};fn_d={score.fn_d}"
    return [[image_id, region, "dsc", _fmt(score.dsc), vox],
            [image_id, region, "sensitivity", _fmt(score.sensitivity), les],
            [image_id, region, "precision", _fmt(score.precision), les]]


def write_metric_csv(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
