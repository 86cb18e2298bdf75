"""Per-subject preparation: normalise, threshold into a bank, fill both modalities."""
from __future__ import annotations

from dataclasses import dataclass

from .filling import FillConfig, fill_wmh
from .masking import DEFAULT_GAMMAS, IntensityLevelBank, TissueStats, build_bank, estimate_gm_stats
from .volume import BinaryMask3D, Volume3D, normalize


@dataclass(frozen=True, eq=False)
class PreparedSubject:
    t1: Volume3D          # normalised originals (generator targets)
    flair: Volume3D
    brain: BinaryMask3D
    norms: tuple          # (t1, flair) NormalizationParams
    stats: TissueStats
    bank: IntensityLevelBank
    filled_t1: Volume3D
    filled_flair: Volume3D
    fill_reports: tuple   # (t1, flair) FillReport


def prepare_subject(t1: Volume3D, flair: Volume3D, brain: BinaryMask3D,
                    gm: BinaryMask3D | None = None, wm: BinaryMask3D | None = None,
                    gammas=DEFAULT_GAMMAS, seed: int = 0, p_lo: float = 1.0,
                    p_hi: float = 99.0) -> PreparedSubject:
    t1n, norm_t1 = normalize(t1, brain, p_lo, p_hi)
    flairn, norm_fl = normalize(flair, brain, p_lo, p_hi)
    stats = estimate_gm_stats(flairn, brain, gm, seed=seed)
    bank = build_bank(flairn, stats, brain, gammas)
    # both modalities share the FLAIR-derived regions, with separate streams
    filled_t1, rep_t1 = fill_wmh(t1n, bank.wmh_mask, FillConfig(rng_seed=2 * seed, wm_mask=wm,
                                                                brain_mask=brain))
    filled_fl, rep_fl = fill_wmh(flairn, bank.wmh_mask, FillConfig(rng_seed=2 * seed + 1, wm_mask=wm,
                                                                   brain_mask=brain))
    return PreparedSubject(t1n, flairn, brain, (norm_t1, norm_fl), stats, bank,
                           filled_t1, filled_fl, (rep_t1, rep_fl))
