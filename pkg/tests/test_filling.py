import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionsynth.errors import FillError
from lesionsynth.filling import FillConfig, fill_wmh
from lesionsynth.volume import BinaryMask3D, Geometry, Volume3D, dilate


def disk(shape, center, radius):
    x, y = np.ogrid[:shape[0], :shape[1]]
    return (x - center[0]) ** 2 + (y - center[1]) ** 2 <= radius ** 2


def setup_disk(rng, radius=8, ring_mean=0.6, ring_std=0.05, shape=(40, 40, 3)):
    g = Geometry.from_spacing(shape)
    data = rng.normal(ring_mean, ring_std, size=shape)
    wmh = np.zeros(shape, bool)
    wmh[:, :, 1] = disk(shape, (20, 20), radius)
    data[wmh] = 0.95
    return Volume3D(data, geometry=g), BinaryMask3D(wmh, geometry=g)


def test_empty_wmh_is_identity(rng):
    vol, wmh = setup_disk(rng)
    out, rep = fill_wmh(vol, BinaryMask3D.empty_like(vol))
    assert out is vol or np.array_equal(out.data, vol.data)
    assert rep.n_regions == 0


def test_constant_ring_fills_exactly():
    g = Geometry.from_spacing((20, 20, 1))
    data = np.full(g.shape, 0.42)
    wmh = np.zeros(g.shape, bool)
    wmh[8:12, 7:13, 0] = True
    data[wmh] = 0.9
    out, rep = fill_wmh(Volume3D(data, geometry=g), BinaryMask3D(wmh, geometry=g),
                        FillConfig(smoothing_sigma_mm=0.0))
    assert np.all(out.data[wmh] == 0.42)
    assert rep.n_regions == 1 and rep.n_filled_voxels == wmh.sum()


def test_filled_mean_matches_ring_statistics(rng):
    vol, wmh = setup_disk(rng, radius=9)
    n = wmh.count
    assert n >= 200
    ring1 = dilate(wmh, 1, "2d-8").data & ~wmh.data
    ring_vals = vol.data[ring1]
    tol = 4 * ring_vals.std() / np.sqrt(n)
    hits = 0
    for seed in range(50):
        out, _ = fill_wmh(vol, wmh, FillConfig(smoothing_sigma_mm=0.0, rng_seed=seed))
        hits += abs(out.data[wmh.data].mean() - ring_vals.mean()) <= tol
    assert hits >= 48


def test_locality_and_determinism(rng):
    vol, wmh = setup_disk(rng, radius=5)
    cfg = FillConfig(rng_seed=7)
    a, _ = fill_wmh(vol, wmh, cfg)
    b, _ = fill_wmh(vol, wmh, cfg)
    assert np.array_equal(a.data, b.data)
    zone = dilate(wmh, 2, "2d-8").data
    assert np.array_equal(a.data[~zone], vol.data[~zone])
    assert not np.array_equal(a.data[zone], vol.data[zone])
    c, _ = fill_wmh(vol, wmh, FillConfig(rng_seed=8))
    assert not np.array_equal(a.data, c.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_locality_on_random_masks(seed):
    rng = np.random.default_rng(seed)
    g = Geometry.from_spacing((14, 12, 3))
    vol = Volume3D(rng.uniform(0.2, 0.8, size=g.shape), geometry=g)
    wmh = BinaryMask3D(rng.uniform(size=g.shape) > 0.85, geometry=g)
    out, rep = fill_wmh(vol, wmh, FillConfig(rng_seed=seed))
    zone = dilate(wmh, 2, "2d-8").data
    assert np.array_equal(out.data[~zone], vol.data[~zone])
    assert np.count_nonzero(out.data != vol.data) <= zone.sum()
    assert np.all(out.data >= 0)


def test_wm_mask_restricts_samples_and_fallback_is_reported():
    g = Geometry.from_spacing((20, 20, 1))
    data = np.full(g.shape, 0.3)
    data[:10] = 0.7            # WM on the low-x half
    wm = np.zeros(g.shape, bool)
    wm[:10] = True
    wmh = np.zeros(g.shape, bool)
    wmh[9:11, 9:11, 0] = True  # straddles the border; ring touches both sides
    wmh[16:18, 16:18, 0] = True  # ring entirely outside WM
    cfg = FillConfig(smoothing_sigma_mm=0.0, wm_mask=BinaryMask3D(wm, geometry=g),
                     brain_mask=BinaryMask3D(np.ones(g.shape, bool), geometry=g))
    out, rep = fill_wmh(Volume3D(data, geometry=g), BinaryMask3D(wmh, geometry=g), cfg)
    np.testing.assert_allclose(out.data[9:11, 9:11, 0], 0.7, rtol=1e-12)
    assert len(rep.fallbacks) == 1 and rep.fallbacks[0][0] == 0
    assert "fallbacks" in rep.to_text()


def test_fully_hyperintense_slice_is_an_error():
    g = Geometry.from_spacing((6, 6, 2))
    data = np.full(g.shape, 0.5)
    wmh = np.zeros(g.shape, bool)
    wmh[:, :, 0] = True
    with pytest.raises(FillError):
        fill_wmh(Volume3D(data, geometry=g), BinaryMask3D(wmh, geometry=g))


def test_invalid_config():
    with pytest.raises(ValueError):
        FillConfig(dilation_rounds=0)
