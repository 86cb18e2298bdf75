import nibabel as nib
import numpy as np
import pytest

from lesionsynth.errors import InvalidTransformError, MalformedImageError
from lesionsynth.nifti import (load_affine_text, load_mask, load_transform, load_volume,
                               save_affine_text, save_displacement, save_mask, save_volume)
from lesionsynth.volume import BinaryMask3D, Geometry, Volume3D


def oblique_affine():
    a = np.array([[0.0, -0.9, 0.1, 12.5], [1.1, 0.0, 0.0, -30.25], [0.0, 0.05, 3.0, 7.0], [0, 0, 0, 1]])
    return a


def test_untouched_int16_volume_round_trips_bytes(tmp_path, rng):
    data = rng.integers(0, 2000, size=(7, 6, 5)).astype(np.int16)
    img = nib.Nifti1Image(data, oblique_affine())
    img.header.set_qform(oblique_affine(), code=1)
    src = tmp_path / "in.nii.gz"
    nib.save(img, src)
    vol = load_volume(src)
    save_volume(vol, tmp_path / "out.nii.gz")
    back = nib.load(tmp_path / "out.nii.gz")
    stored = nib.load(src)
    assert np.array_equal(np.asarray(back.dataobj), data)
    assert np.array_equal(back.affine, stored.affine)
    assert np.array_equal(back.header.get_qform(), stored.header.get_qform())
    assert nib.aff2axcodes(back.affine) == nib.aff2axcodes(img.affine)
    assert back.header.get_data_dtype() == np.int16


def test_float_volume_round_trip(tmp_path, rng):
    g = Geometry((5, 4, 3), oblique_affine())
    v = Volume3D(rng.normal(size=g.shape).astype(np.float32), geometry=g)
    save_volume(v, tmp_path / "v.nii")
    w = load_volume(tmp_path / "v.nii")
    assert np.array_equal(w.data, v.data)
    assert np.allclose(w.affine, v.affine, atol=1e-6)


def test_mask_stored_as_uint8(tmp_path, rng):
    m = BinaryMask3D(rng.uniform(size=(4, 4, 4)) > 0.5)
    save_mask(m, tmp_path / "m.nii.gz")
    img = nib.load(tmp_path / "m.nii.gz")
    assert img.get_data_dtype() == np.uint8
    assert set(np.unique(np.asarray(img.dataobj))) <= {0, 1}
    assert np.array_equal(load_mask(tmp_path / "m.nii.gz").data, m.data)


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.nii.gz"
    p.write_bytes(b"not a nifti")
    with pytest.raises(MalformedImageError):
        load_volume(p)


def test_affine_text_and_displacement(tmp_path, rng):
    a = oblique_affine()
    save_affine_text(a, tmp_path / "a.txt")
    assert np.array_equal(load_affine_text(tmp_path / "a.txt"), a)
    disp = rng.normal(size=(4, 3, 2, 3)).astype(np.float32)
    save_displacement(disp, np.eye(4), tmp_path / "d.nii.gz")
    tf = load_transform(tmp_path / "a.txt", tmp_path / "d.nii.gz", Geometry((4, 3, 2), np.eye(4)))
    assert np.array_equal(tf.displacement, disp.astype(np.float64))
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(InvalidTransformError):
        load_affine_text(tmp_path / "bad.txt")
