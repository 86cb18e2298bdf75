import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesionsynth.errors import (DegenerateRangeError, GeometryMismatchError, InvalidTransformError)
from lesionsynth.volume import (BinaryMask3D, Geometry, SpatialTransform, Volume3D, apply_normalization,
                                check_aligned, connected_components, denormalize, dilate,
                                gaussian_smooth, normalize, resample, resample_mask)

from conftest import make_mask, make_volume


def translation(dx=0.0, dy=0.0, dz=0.0):
    a = np.eye(4)
    a[:3, 3] = (dx, dy, dz)
    return a


def rotation_z(deg):
    t = np.deg2rad(deg)
    a = np.eye(4)
    a[:2, :2] = [[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]
    return a


# ---------------------------------------------------------------- geometry

def test_geometry_rejects_bad_shapes_and_singular_affines():
    with pytest.raises(Exception):
        Geometry((0, 3, 3), np.eye(4))
    sing = np.eye(4)
    sing[2, 2] = 0
    with pytest.raises(InvalidTransformError):
        Geometry((3, 3, 3), sing)


def test_volume_rejects_nan():
    with pytest.raises(Exception):
        Volume3D(np.full((2, 2, 2), np.nan))


def test_volumes_are_immutable():
    v = make_volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_alignment_tolerance(geom):
    a = Volume3D(np.zeros(geom.shape), geometry=geom)
    nudged = geom.affine.copy()
    nudged[0, 3] += 1e-9
    b = Volume3D(np.zeros(geom.shape), affine=nudged)
    check_aligned(a, b)
    nudged[0, 3] += 1e-3
    with pytest.raises(GeometryMismatchError):
        check_aligned(a, Volume3D(np.zeros(geom.shape), affine=nudged))


# ---------------------------------------------------------------- resampling

def test_identity_resample_is_bitwise(geom, rng):
    v = Volume3D(rng.normal(size=geom.shape), geometry=geom)
    out = resample(v, SpatialTransform.identity(), geom)
    assert np.array_equal(out.data, v.data)
    # also through the general path with an explicit (non-shortcut) identity field
    out2 = resample(v, SpatialTransform(np.eye(4), np.zeros((*geom.shape, 3))), geom)
    assert np.array_equal(out2.data, v.data)


def test_translation_by_one_voxel_moves_value(geom):
    data = np.zeros(geom.shape)
    data[4, 5, 2] = 3.5
    v = Volume3D(data, geometry=geom)
    out = resample(v, SpatialTransform(translation(dx=geom.spacing[0])), geom)
    expected = np.zeros(geom.shape)
    expected[5, 5, 2] = 3.5
    assert np.array_equal(out.data, expected)


def test_translation_along_slices_uses_mm(geom):
    data = np.zeros(geom.shape)
    data[4, 5, 2] = 1.0
    out = resample(Volume3D(data, geometry=geom), SpatialTransform(translation(dz=2.0)), geom)
    assert out.data[4, 5, 3] == 1.0 and out.data.sum() == 1.0


def test_constant_volume_under_rotation_stays_constant():
    g = Geometry.from_spacing((20, 20, 3), origin=(-9.5, -9.5, -1.0))
    v = Volume3D(np.full(g.shape, 7.0), geometry=g)
    out = resample(v, SpatialTransform(rotation_z(17.0)), g)
    interior = np.zeros(g.shape, bool)
    interior[6:14, 6:14, :] = True
    np.testing.assert_allclose(out.data[interior], 7.0, atol=1e-6)


def test_outside_field_is_zero(geom):
    v = Volume3D(np.ones(geom.shape), geometry=geom)
    out = resample(v, SpatialTransform(translation(dx=100.0)), geom)
    assert not out.data.any()


def test_displacement_field_acts_like_translation(geom, rng):
    v = Volume3D(rng.normal(size=geom.shape), geometry=geom)
    # pulling from y + d with d = -1 mm equals a +1 mm forward translation
    disp = np.zeros((*geom.shape, 3))
    disp[..., 0] = -1.0
    a = resample(v, SpatialTransform(None, disp), geom)
    b = resample(v, SpatialTransform(translation(dx=1.0)), geom)
    assert np.array_equal(a.data, b.data)


def test_singular_transform_rejected():
    with pytest.raises(InvalidTransformError):
        SpatialTransform(np.zeros((4, 4)))


def test_resample_mask_identity_and_binary(geom, rng):
    m = BinaryMask3D(rng.uniform(size=geom.shape) > 0.7, geometry=geom)
    assert np.array_equal(resample_mask(m, SpatialTransform.identity(), geom).data, m.data)
    out = resample_mask(m, SpatialTransform(rotation_z(11) @ translation(0.3, -0.7, 0.2)), geom)
    assert out.data.dtype == bool


def test_half_voxel_shift_of_single_voxel_sets_exactly_one(geom):
    data = np.zeros(geom.shape, bool)
    data[4, 4, 2] = True
    m = BinaryMask3D(data, geometry=geom)
    for shift in (0.5, -0.5):
        out = resample_mask(m, SpatialTransform(translation(dx=shift)), geom)
        assert out.count == 1


# ---------------------------------------------------------------- morphology

def test_components_single_voxel():
    d = np.zeros((5, 5, 3), bool)
    d[2, 2, 1] = True
    cc = connected_components(make_mask(d))
    assert cc.count == 1 and cc.sizes().tolist() == [1]


def test_components_2d_vs_3d_connectivity():
    d = np.zeros((5, 5, 3), bool)
    d[1, 1, 0] = d[2, 2, 0] = True
    assert connected_components(make_mask(d), "2d-8").count == 1
    d2 = np.zeros((5, 5, 3), bool)
    d2[1, 1, 0] = d2[2, 2, 1] = True  # corner neighbours across slices
    assert connected_components(make_mask(d2), "2d-8").count == 2
    assert connected_components(make_mask(d2), "3d-26").count == 1


def test_components_full_mask():
    m = make_mask(np.ones((4, 4, 5), bool))
    assert connected_components(m, "2d-8").count == 5
    assert connected_components(m, "3d-26").count == 1
    assert connected_components(make_mask(np.zeros((3, 3, 3)))).count == 0


def test_dilate_examples():
    d = np.zeros((7, 7, 7), bool)
    d[3, 3, 3] = True
    m = make_mask(d)
    assert np.array_equal(dilate(m, 0).data, d)
    assert dilate(m, 1, "3d-26").count == 27
    assert dilate(m, 1, "2d-8").count == 9
    assert dilate(m, 2, "3d-26").count == 125


mask_arrays = arrays(bool, (6, 5, 4), elements=st.booleans())


@settings(max_examples=40, deadline=None)
@given(mask_arrays)
def test_components_partition_the_mask(arr):
    for conn in ("2d-8", "3d-26"):
        cc = connected_components(make_mask(arr), conn)
        assert np.array_equal(cc.labels > 0, arr)
        assert cc.sizes().sum() == arr.sum()
        assert set(np.unique(cc.labels[arr])) == set(range(1, cc.count + 1))


@settings(max_examples=40, deadline=None)
@given(mask_arrays, st.integers(0, 3))
def test_dilation_is_extensive_and_monotone(arr, rounds):
    m = make_mask(arr)
    a = dilate(m, rounds)
    b = dilate(m, rounds + 1)
    assert np.all(a.data[arr])
    assert np.all(b.data[a.data])
    assert a.geometry is m.geometry


# ---------------------------------------------------------------- smoothing

def brute_gaussian_nearest(data, sigma):
    """Separable Gaussian with edge replication, truncated at 4 sigma."""
    out = data.astype(float)
    for axis, s in enumerate(sigma):
        if s == 0:
            continue
        radius = int(4.0 * s + 0.5)
        x = np.arange(-radius, radius + 1)
        w = np.exp(-0.5 * (x / s) ** 2)
        w /= w.sum()
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        p = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        for k, wk in enumerate(w):
            sl = [slice(None)] * 3
            sl[axis] = slice(k, k + out.shape[axis])
            acc += wk * p[tuple(sl)]
        out = acc
    return out


def test_gaussian_smooth_matches_direct_convolution(rng):
    g = Geometry.from_spacing((12, 11, 4), (0.5, 0.5, 3.0))
    v = Volume3D(rng.normal(size=g.shape), geometry=g)
    region = BinaryMask3D(rng.uniform(size=g.shape) > 0.5, geometry=g)
    out = gaussian_smooth(v, (0.5, 0.5, 0.0), region)  # 1 voxel in-plane
    want = brute_gaussian_nearest(v.data, (1.0, 1.0, 0.0))
    np.testing.assert_allclose(out.data[region.data], want[region.data], atol=1e-12)
    assert np.array_equal(out.data[~region.data], v.data[~region.data])


def test_gaussian_smooth_identities(rng, geom):
    v = Volume3D(rng.normal(size=geom.shape), geometry=geom)
    full = BinaryMask3D(np.ones(geom.shape, bool), geometry=geom)
    assert np.array_equal(gaussian_smooth(v, 0.0, full).data, v.data)
    assert np.array_equal(gaussian_smooth(v, 2.0, BinaryMask3D.empty_like(v)).data, v.data)
    c = Volume3D(np.full(geom.shape, 3.25), geometry=geom)
    np.testing.assert_allclose(gaussian_smooth(c, (1.0, 2.0, 3.0), full).data, 3.25, atol=1e-12)


# ---------------------------------------------------------------- normalisation

def test_normalize_maps_exact_span_to_unit(geom, rng):
    data = rng.uniform(10, 50, size=geom.shape)
    brain = BinaryMask3D(np.ones(geom.shape, bool), geometry=geom)
    out, params = normalize(Volume3D(data, geometry=geom), brain, 0, 100)
    assert out.data.min() == 0.0 and out.data.max() == 1.0
    assert params.low == data.min() and params.high == data.max()


def test_normalize_round_trip_and_clipping(geom, rng):
    data = rng.normal(100, 10, size=geom.shape)
    data[0, 0, 0] = 1e4  # outlier
    vol = Volume3D(data, geometry=geom)
    brain = BinaryMask3D(rng.uniform(size=geom.shape) > 0.2, geometry=geom)
    brain = brain.with_data(brain.data | (np.indices(geom.shape)[0] == 0))
    out, params = normalize(vol, brain)
    assert out.data[0, 0, 0] == 1.0
    assert out.data.min() >= 0 and out.data.max() <= 1
    back = denormalize(out, params)
    unclipped = (data > params.low) & (data < params.high)
    assert np.abs(back.data[unclipped] - data[unclipped]).max() < 1e-6
    assert np.array_equal(apply_normalization(vol, params).data, out.data)


def test_normalize_degenerate(geom):
    vol = Volume3D(np.full(geom.shape, 5.0), geometry=geom)
    brain = BinaryMask3D(np.ones(geom.shape, bool), geometry=geom)
    with pytest.raises(DegenerateRangeError):
        normalize(vol, brain)
