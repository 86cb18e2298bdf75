import numpy as np
import pytest

from lesionsynth.errors import InvalidConfigError, PlacementError
from lesionsynth.phantom import PhantomSpec, make_phantom


def test_deterministic_per_seed():
    a, b = make_phantom(seed=3), make_phantom(seed=3)
    for name in ("t1", "flair", "lesion", "gm", "wm", "brain"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)
    c = make_phantom(seed=4)
    assert not np.array_equal(a.flair.data, c.flair.data)


@pytest.mark.parametrize("seed", range(8))
def test_mask_nesting_and_lesion_contrast(seed):
    spec = PhantomSpec()
    ph = make_phantom(spec, seed)
    les, wm, brain = ph.lesion.data, ph.wm.data, ph.brain.data
    assert les.any()
    assert not (les & ~wm).any() and not (wm & ~brain).any() and not (ph.gm.data & ~brain).any()
    assert not (ph.gm.data & wm).any()
    healthy_wm = wm & ~les
    assert ph.flair.data[les].mean() - ph.flair.data[healthy_wm].mean() >= spec.lesion_offset_flair / 2
    assert ph.t1.data[les].mean() < ph.t1.data[healthy_wm].mean()
    assert np.all(ph.t1.data[~brain] == 0) and np.all(ph.flair.data >= 0)


def test_tissue_ordering():
    ph = make_phantom(seed=1)
    wm = ph.wm.data & ~ph.lesion.data
    gm = ph.gm.data
    assert ph.t1.data[wm].mean() > ph.t1.data[gm].mean()
    assert ph.flair.data[gm].mean() > ph.flair.data[wm].mean()


def test_healthy_variant_has_no_lesions():
    ph = make_phantom(PhantomSpec().healthy(), seed=2)
    assert ph.lesion.count == 0


def test_geometry_is_centred():
    spec = PhantomSpec()
    g = spec.geometry()
    centre = g.affine @ np.r_[(np.asarray(spec.shape) - 1) / 2.0, 1.0]
    np.testing.assert_allclose(centre[:3], 0.0, atol=1e-12)
    np.testing.assert_allclose(g.spacing, spec.spacing)


def test_spec_validation():
    with pytest.raises(InvalidConfigError):
        PhantomSpec(lesion_offset_flair=-5.0)
    with pytest.raises(InvalidConfigError):
        PhantomSpec(t1_means=dict(background=0.0, csf=80.0, gm=75.0, wm=115.0))
    with pytest.raises(InvalidConfigError):
        PhantomSpec(lesion_count=(4, 2))


def test_unplaceable_lesions_raise():
    spec = PhantomSpec(lesion_count=(3, 3), lesion_radius_mm=(30.0, 31.0), max_retries=5)
    with pytest.raises(PlacementError):
        make_phantom(spec, seed=0)
