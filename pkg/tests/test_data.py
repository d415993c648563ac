import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sourceid.core import ConfigurationError, DegenerateInputError
from sourceid.data import (
    AugmentParams,
    DatasetManifest,
    LesionParams,
    Volume,
    augment,
    brain_mask_threshold,
    crop_or_pad,
    extract_slices,
    flip,
    foreground_normalize,
    generate_phantom_dataset,
    load_manifest_splits,
    load_phantom_dataset,
    load_volume,
    preprocess_volume,
    save_phantom_dataset,
    spatial_coords,
    warp,
)

from .conftest import make_slice


def vol(a, names=None):
    a = np.asarray(a, dtype=np.float32)
    while a.ndim < 4:
        a = a[..., None]
    return Volume(a, "p0", names or [f"m{i}" for i in range(a.shape[3])])


# ---- crop / pad -------------------------------------------------------------


def test_center_crop_removes_20_per_side():
    a = np.arange(240 * 240, dtype=np.float32).reshape(240, 240)
    out = crop_or_pad(vol(a), (200, 200)).voxels[..., 0, 0]
    assert out.shape == (200, 200)
    np.testing.assert_array_equal(out, a[20:220, 20:220])


def test_crop_identity():
    a = np.random.default_rng(0).random((200, 200, 3, 2))
    np.testing.assert_array_equal(crop_or_pad(vol(a, ["a", "b"]), (200, 200)).voxels, a.astype(np.float32))


def test_center_pad_adds_10_rows_each_side():
    a = np.ones((180, 200), dtype=np.float32)
    out = crop_or_pad(vol(a), (200, 200)).voxels[..., 0, 0]
    assert out.shape == (200, 200)
    assert np.all(out[:10] == 0) and np.all(out[-10:] == 0)
    assert np.all(out[10:190] == 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 30), st.integers(3, 30), st.integers(3, 30), st.integers(3, 30))
def test_crop_or_pad_idempotent(h, w, th, tw):
    a = np.random.default_rng(h * 31 + w).random((h, w, 2, 1))
    once = crop_or_pad(vol(a), (th, tw))
    np.testing.assert_array_equal(crop_or_pad(once, (th, tw)).voxels, once.voxels)


# ---- masks + normalisation --------------------------------------------------


def test_brain_mask_threshold_cases():
    assert not brain_mask_threshold(np.zeros((4, 4, 2))).any()
    px = np.zeros((4, 4, 2))
    px[1, 2, 1] = 3.0
    m = brain_mask_threshold(px)
    assert m.sum() == 1 and m[1, 2]


def test_phantom_mask_matches_generator_support(phantom_cases):
    c = phantom_cases[0]
    np.testing.assert_array_equal(brain_mask_threshold(c.volume.voxels), c.labels >= 1)


def test_foreground_normalize_population_std():
    a = np.array([[0, 1, 2, 3]], dtype=np.float32)
    mask = a > 0
    out = foreground_normalize(vol(a), mask[..., None]).voxels[..., 0, 0]
    np.testing.assert_allclose(out[0], [0, -1.2247449, 0, 1.2247449], atol=1e-6)


def test_foreground_normalize_moments_and_idempotence(phantom_cases):
    v = phantom_cases[1].volume
    mask = brain_mask_threshold(v.voxels)
    n1 = foreground_normalize(v, mask)
    for c in range(v.n_modalities):
        fg = n1.voxels[..., c][mask].astype(np.float64)
        assert abs(fg.mean()) < 1e-6 and abs(fg.std() - 1) < 1e-6
        assert np.all(n1.voxels[..., c][~mask] == 0)
    n2 = foreground_normalize(n1, mask)
    np.testing.assert_allclose(n2.voxels, n1.voxels, atol=1e-5)


def test_foreground_normalize_errors():
    with pytest.raises(DegenerateInputError):
        foreground_normalize(vol(np.ones((3, 3))), np.zeros((3, 3, 1), bool))
    with pytest.raises(DegenerateInputError):
        foreground_normalize(vol(np.full((3, 3), 5.0)), np.ones((3, 3, 1), bool))


# ---- phantom ----------------------------------------------------------------


def test_phantom_count_distinct_and_deterministic():
    a = generate_phantom_dataset(3, 32, 2, seed=9, n_slices=6)
    b = generate_phantom_dataset(3, 32, 2, seed=9, n_slices=6)
    assert len(a) == 3
    masks = [c.labels >= 1 for c in a]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not np.array_equal(masks[i], masks[j])
    for x, y in zip(a, b):
        assert x.volume.voxels.tobytes() == y.volume.voxels.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_phantom_lesion_fraction_in_requested_range():
    lp = LesionParams(fraction=(0.01, 0.05))
    for c in generate_phantom_dataset(6, 48, 2, lp, seed=1, n_slices=8):
        frac = (c.labels == 2).sum() / (c.labels >= 1).sum()
        assert 0.01 <= frac <= 0.05


def test_phantom_lesions_inside_brain(phantom_cases):
    for c in phantom_cases:
        brain = brain_mask_threshold(c.volume.voxels)
        assert np.all(brain[c.labels >= 2])


def test_phantom_nested_core_class():
    cases = generate_phantom_dataset(2, 48, 2, LesionParams(n_classes=3, fraction=(0.01, 0.2)), seed=0, n_slices=8)
    for c in cases:
        assert set(np.unique(c.labels)) <= {0, 1, 2, 3}
        assert (c.labels == 3).any()


def test_phantom_infeasible_lesions():
    with pytest.raises(ConfigurationError, match="radius"):
        generate_phantom_dataset(1, 32, lesion_params=LesionParams(radius=(0.6, 0.8)))


def test_phantom_round_trip_on_disk(tmp_path, phantom_cases):
    save_phantom_dataset(phantom_cases[:4], tmp_path, seed=3, n_val=1, n_test=1)
    side = json.loads((tmp_path / "dataset.json").read_text())
    assert side["dtype"] == "<f4" and side["shape"] == list(phantom_cases[0].volume.voxels.shape)
    raw = np.fromfile(tmp_path / f"{phantom_cases[0].patient_id}.image.f32", dtype="<f4")
    assert raw.size == phantom_cases[0].volume.voxels.size
    back = load_phantom_dataset(tmp_path)
    for a, b in zip(phantom_cases[:4], back):
        np.testing.assert_array_equal(a.volume.voxels, b.volume.voxels)
        np.testing.assert_array_equal(a.labels, b.labels)
    m = DatasetManifest.load(tmp_path / "manifest.json")
    assert sorted(p.split for p in m.patients) == ["test", "train", "train", "val"]
    splits = load_manifest_splits(tmp_path / "manifest.json", (32, 32))
    assert len(splits.train) == 2 and len(splits.val) == 1 and len(splits.test) == 1


# ---- NIfTI ------------------------------------------------------------------


def _write_nifti(path, data):
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.asarray(data, dtype=np.float32), np.eye(4)), str(path))


def test_load_volume_four_and_two_modalities(tmp_path):
    rng = np.random.default_rng(0)
    files = []
    for i in range(4):
        files.append(tmp_path / f"m{i}.nii.gz")
        _write_nifti(files[-1], rng.random((10, 12, 3)))
    v = load_volume(files, "pt", ["t1", "t1ce", "t2", "flair"])
    assert v.n_modalities == 4 and v.voxels.shape == (10, 12, 3, 4)
    assert v.spacing == (1.0, 1.0, 1.0)
    assert load_volume(files[:2], "pt", ["t1", "flair"]).n_modalities == 2


def test_load_volume_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "missing.nii.gz")
    _write_nifti(tmp_path / "a.nii", np.ones((4, 4, 2)))
    from sourceid.data import SchemaError

    with pytest.raises(SchemaError):
        load_volume([tmp_path / "a.nii"], "p", ["t1", "flair"])


# ---- slices -----------------------------------------------------------------


def test_extract_slices_count_flags_and_union(phantom_cases):
    v = phantom_cases[0].volume
    voxels = v.voxels.copy()
    voxels[:, :, 0] = 0
    v0 = v.replace(voxels)
    mask = brain_mask_threshold(v0.voxels)
    out = extract_slices(v0, phantom_cases[0].labels, mask)
    assert len(out) == v.voxels.shape[2]
    assert not out[0][0].eligible
    union = np.stack([s.brain_mask for s, _ in out], axis=-1)
    np.testing.assert_array_equal(union, mask)


# ---- augmentation -----------------------------------------------------------


def test_augment_zero_probabilities_is_identity(phantom_cases, rng):
    v, mask, labels = preprocess_volume(phantom_cases[0].volume, (32, 32), phantom_cases[0].labels)
    s, lab = extract_slices(v, labels, mask)[4]
    out, out_lab = augment(s, lab, rng, AugmentParams.none())
    np.testing.assert_array_equal(out.pixels, s.pixels)
    np.testing.assert_array_equal(out_lab, lab)


def test_flip_is_involution():
    a = np.random.default_rng(0).random((5, 6, 2))
    for axis in (0, 1):
        np.testing.assert_array_equal(flip(flip(a, axis), axis), a)


def test_rotation_90_on_asymmetric_pattern():
    a = np.arange(1, 17, dtype=np.float64).reshape(4, 4)
    expected = np.array([[4, 8, 12, 16], [3, 7, 11, 15], [2, 6, 10, 14], [1, 5, 9, 13]], dtype=np.float64)
    coords = spatial_coords((4, 4), angle_deg=90.0)
    np.testing.assert_allclose(warp(a, coords, order=1), expected, atol=1e-9)
    np.testing.assert_array_equal(warp(a, coords, order=0), expected)


def test_augment_applies_one_transform_to_all_channels_and_labels(phantom_cases):
    v, mask, labels = preprocess_volume(phantom_cases[2].volume, (32, 32), phantom_cases[2].labels)
    s, lab = extract_slices(v, labels, mask)[4]
    # duplicate channel: both copies must stay identical
    s2 = make_slice(np.concatenate([s.pixels[..., :1], s.pixels[..., :1]], -1), s.brain_mask)
    params = AugmentParams(p_rotate=1, p_scale=1, p_flip=0.5, p_elastic=1)
    for k in range(10):
        out, out_lab = augment(s2, lab, np.random.default_rng(k), params)
        np.testing.assert_array_equal(out.pixels[..., 0], out.pixels[..., 1])
        assert out.pixels.shape == s2.pixels.shape
        assert set(np.unique(out_lab)) <= set(np.unique(lab))
        # background stays zero outside the warped mask
        assert np.all(out.pixels[~out.brain_mask] == 0)


def test_augment_is_deterministic_given_seed(phantom_cases):
    s = make_slice(np.random.default_rng(0).random((16, 16, 2)))
    a, _ = augment(s, None, np.random.default_rng(5), AugmentParams(p_rotate=1, p_elastic=1))
    b, _ = augment(s, None, np.random.default_rng(5), AugmentParams(p_rotate=1, p_elastic=1))
    np.testing.assert_array_equal(a.pixels, b.pixels)
