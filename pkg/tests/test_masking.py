import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionsynth.errors import EmptyInputError, InsufficientSampleError, InvalidConfigError
from lesionsynth.masking import (DEFAULT_GAMMAS, TissueStats, build_bank, estimate_gm_stats, load_bank,
                                 save_bank, threshold_for)
from lesionsynth.volume import BinaryMask3D, Geometry, Volume3D


def test_default_gamma_grid():
    assert DEFAULT_GAMMAS == (0.5, 0.8, 1.1, 1.4, 1.7, 2.1, 2.4, 2.7)


@pytest.mark.parametrize("mu, sigma, gamma, expected", [
    (100, 10, 0.5, 105), (0, 1, 2.7, 2.7), (100, 10, 0.0, 100)])
def test_threshold_examples(mu, sigma, gamma, expected):
    assert threshold_for(TissueStats(mu, sigma), gamma) == pytest.approx(expected, abs=1e-12)


def line_volume(values):
    g = Geometry.from_spacing((len(values), 1, 1))
    return (Volume3D(np.asarray(values, float).reshape(-1, 1, 1), geometry=g),
            BinaryMask3D(np.ones((len(values), 1, 1), bool), geometry=g))


def band_of(bank, i):
    return [k for k, m in enumerate(bank.masks, start=1) if m.data[i, 0, 0]]


def test_bank_thresholds_and_band_membership():
    flair, brain = line_volume([106, 130, 104, 127.5, 105.0, 111.0])
    bank = build_bank(flair, TissueStats(100, 10), brain)
    np.testing.assert_allclose(bank.thresholds, [105, 108, 111, 114, 117, 121, 124, 127], atol=1e-12)
    assert band_of(bank, 0) == [1]
    assert band_of(bank, 1) == [8]
    assert band_of(bank, 2) == []
    assert band_of(bank, 3) == [8]
    assert band_of(bank, 4) == []      # strict lower bound
    # upper bound inclusive: T_{1.1} sits in band 2 (gamma 0.8 -> 1.1)
    t3 = bank.thresholds[2]
    flair2, brain2 = line_volume([t3])
    assert band_of(build_bank(flair2, TissueStats(100, 10), brain2), 0) == [2]
    assert bank.wmh_mask.data[:, 0, 0].tolist() == [True, True, False, True, False, True]


def test_all_below_threshold_gives_empty_bank(rng):
    g = Geometry.from_spacing((6, 6, 3))
    flair = Volume3D(rng.uniform(0, 104.9, size=g.shape), geometry=g)
    brain = BinaryMask3D(np.ones(g.shape, bool), geometry=g)
    bank = build_bank(flair, TissueStats(100, 10), brain)
    assert bank.wmh_mask.count == 0 and all(m.count == 0 for m in bank.masks)


def test_non_increasing_gammas_rejected():
    flair, brain = line_volume([1, 2, 3])
    with pytest.raises(InvalidConfigError):
        build_bank(flair, TissueStats(0, 1), brain, gammas=(0.5, 0.5, 0.8))
    with pytest.raises(InvalidConfigError):
        build_bank(flair, TissueStats(0, 1), brain, gammas=(1.0, 0.5))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(50, 150), st.floats(1, 30))
def test_partition_and_band_invariants(seed, mu, sigma):
    rng = np.random.default_rng(seed)
    g = Geometry.from_spacing((9, 8, 4))
    flair = Volume3D(rng.normal(mu + sigma, 2 * sigma, size=g.shape), geometry=g)
    brain = BinaryMask3D(rng.uniform(size=g.shape) > 0.3, geometry=g)
    bank = build_bank(flair, TissueStats(mu, sigma), brain)
    stack = np.stack([m.data for m in bank.masks])
    assert stack.sum(0).max() <= 1
    assert np.array_equal(stack.any(0), bank.wmh_mask.data)
    assert not (stack.any(0) & ~brain.data).any()
    t = bank.thresholds
    assert all(b > a for a, b in zip(t, t[1:]))
    for i, m in enumerate(bank.masks):
        v = flair.data[m.data]
        assert np.all(v > t[i])
        if i + 1 < len(t):
            assert np.all(v <= t[i + 1])


def test_gm_stats_from_mask():
    g = Geometry.from_spacing((12, 1, 1))
    vals = np.array([99, 100, 101] * 4, float)
    flair = Volume3D(vals.reshape(-1, 1, 1), geometry=g)
    full = BinaryMask3D(np.ones(g.shape, bool), geometry=g)
    s = estimate_gm_stats(flair, full, gm_mask=full)
    assert s.mu_gm == pytest.approx(100.0, abs=1e-12)
    assert s.sigma_gm == pytest.approx(np.sqrt(8.0 / 11.0), abs=1e-12)


def test_gm_stats_mixture_fallback(rng):
    g = Geometry.from_spacing((30, 30, 9))
    labels = rng.integers(0, 3, size=g.shape)
    means = np.array([40.0, 100.0, 160.0])
    flair = Volume3D(means[labels] + rng.normal(0, 8, size=g.shape), geometry=g)
    brain = BinaryMask3D(np.ones(g.shape, bool), geometry=g)
    s = estimate_gm_stats(flair, brain)
    assert abs(s.mu_gm - 100.0) <= 2.0
    assert s.sigma_gm == pytest.approx(8.0, rel=0.15)


def test_gm_stats_errors():
    g = Geometry.from_spacing((5, 5, 1))
    flair = Volume3D(np.arange(25.0).reshape(g.shape), geometry=g)
    with pytest.raises(EmptyInputError):
        estimate_gm_stats(flair, BinaryMask3D.empty_like(flair))
    small = np.zeros(g.shape, bool)
    small[0, :3, 0] = True
    with pytest.raises(InsufficientSampleError):
        estimate_gm_stats(flair, BinaryMask3D(np.ones(g.shape, bool), geometry=g),
                          gm_mask=BinaryMask3D(small, geometry=g))


def test_bank_save_load_round_trip(tmp_path, rng):
    g = Geometry.from_spacing((8, 7, 3), (0.9, 0.9, 3.0))
    flair = Volume3D(rng.normal(110, 10, size=g.shape), geometry=g)
    brain = BinaryMask3D(np.ones(g.shape, bool), geometry=g)
    bank = build_bank(flair, TissueStats(100, 10), brain)
    save_bank(bank, tmp_path / "bank")
    names = sorted(p.name for p in (tmp_path / "bank").iterdir())
    assert names == sorted(["bank.json", "wmh.nii.gz"] + [f"il_{i}.nii.gz" for i in range(1, 9)])
    back = load_bank(tmp_path / "bank")
    assert back.thresholds == bank.thresholds and back.stats == bank.stats
    for a, b in zip(back.masks, bank.masks):
        assert np.array_equal(a.data, b.data)
