"""Graft a source subject's lesions onto a target brain through its IL bank."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .generator import GeneratorModel, synthesize
from .masking import IntensityLevelBank
from .volume import (BinaryMask3D, Components, Geometry, SpatialTransform, Volume3D,
                     check_aligned, connected_components, dilate, resample_mask)


@dataclass(frozen=True, eq=False)
class TransplantSpec:
    source_lesion_mask: BinaryMask3D
    source_bank: IntensityLevelBank
    transform: SpatialTransform
    lesion_dilation_rounds: int = 1
    # False: overwrite bands inside the graft region; True: only add the
    # payload where it sets a band, keeping the target elsewhere
    additive: bool = False

    def __post_init__(self):
        check_aligned(self.source_lesion_mask, self.source_bank.wmh_mask)
        if self.lesion_dilation_rounds < 0:
            raise ValueError("lesion_dilation_rounds must be >= 0")


@dataclass(frozen=True, eq=False)
class LesionPayload:
    lesion_mask: BinaryMask3D   # resampled, not dilated
    components: Components      # 26-connected lesions of lesion_mask
    region: BinaryMask3D        # union of the dilated components
    bands: tuple                # resampled IL masks (bool arrays)


def resample_lesion_payload(spec: TransplantSpec, target_grid: Geometry) -> LesionPayload:
    lesion = resample_mask(spec.source_lesion_mask, spec.transform, target_grid)
    bands = tuple(resample_mask(m, spec.transform, target_grid).data for m in spec.source_bank.masks)
    comps = connected_components(lesion, "3d-26")
    if comps.count == 0:
        warnings.warn("lesion mask is empty after resampling; nothing to transplant", stacklevel=2)
    # dilation distributes over union, so dilating the whole mask equals the
    # union of the individually dilated components
    region = dilate(lesion, spec.lesion_dilation_rounds, "3d-26")
    return LesionPayload(lesion, comps, region, bands)


def graft_bank(target_bank: IntensityLevelBank, payload: LesionPayload,
               additive: bool = False) -> IntensityLevelBank:
    check_aligned(target_bank.wmh_mask, payload.region)
    if len(payload.bands) != len(target_bank.masks):
        raise ValueError("payload and target banks have different band counts")
    region = payload.region.data
    if not region.any():
        return target_bank
    if additive:
        set_here = region & np.any(np.stack(payload.bands), axis=0)
    else:
        set_here = region
    new = [np.where(set_here, p, t.data) for p, t in zip(payload.bands, target_bank.masks)]
    return target_bank.replace_masks(new)


def transplant(model: GeneratorModel, filled_t1: Volume3D, filled_flair: Volume3D,
               target_bank: IntensityLevelBank, spec: TransplantSpec, brain: BinaryMask3D,
               norms=None):
    """Return ``(synthetic T1, synthetic FLAIR, lesion mask in target space)``."""
    check_aligned(filled_t1, filled_flair, target_bank.wmh_mask, brain)
    payload = resample_lesion_payload(spec, filled_t1.geometry)
    bank = graft_bank(target_bank, payload, spec.additive)
    syn_t1, syn_flair = synthesize(model, filled_t1, filled_flair, bank, brain, norms)
    return syn_t1, syn_flair, payload.lesion_mask
