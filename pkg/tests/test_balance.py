import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wingloss.balance import (
    AugmentationConfig,
    AugmentationConfigError,
    AugmentationSpec,
    apply_augmentation,
    balance,
    blur,
    build_histogram,
    identity_manifest,
    materialize,
    read_manifest_entries,
)
from wingloss.data import Dataset, DatasetError, SyntheticConfig, full_image_bbox, generate_synthetic, render_blobs
from wingloss.shapes import ShapeModel

SYM5 = np.array([1, 0, 2, 4, 3])


class FixedPose:
    """Stands in for a fitted ShapeModel with preset pose coefficients."""

    pose_component = 0

    def __init__(self, coeffs):
        self.coeffs = np.asarray(coeffs, dtype=float)

    def pose_coefficients(self, shapes):
        return self.coeffs


def tiny_dataset(n, size=16):
    rng = np.random.default_rng(n)
    shapes = rng.uniform(4, 12, (n, 5, 2))
    images = np.zeros((n, size, size, 1))
    boxes = np.array([full_image_bbox(size, size)] * n)
    return Dataset(images, shapes, boxes, SYM5)


# --------------------------------------------------------------------------
# histogram


def test_histogram_example():
    h = build_histogram([0, 1, 2, 3], 2)
    np.testing.assert_array_equal(h.counts, [2, 2])
    np.testing.assert_allclose(h.edges, [0, 1.5, 3])


def test_histogram_degenerate_range():
    h = build_histogram([2.0, 2.0, 2.0], 3)
    np.testing.assert_allclose(h.edges[[0, -1]], [1.5, 2.5])
    assert sorted(h.counts) == [0, 0, 3]


def test_histogram_errors():
    with pytest.raises(ValueError):
        build_histogram([1.0], 0)
    with pytest.raises(ValueError):
        build_histogram([], 3)


@settings(max_examples=60, deadline=None)
@given(coeffs=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200), k=st.integers(1, 20))
def test_histogram_invariants(coeffs, k):
    h = build_histogram(coeffs, k)
    assert h.counts.sum() == len(coeffs)
    assert np.all(np.diff(h.edges) > 0)
    c = np.asarray(coeffs)
    assert np.all((c >= h.edges[0]) & (c <= h.edges[-1]))
    if c.max() > c.min():
        assert h.assignments[np.argmax(c)] == k - 1


def test_histogram_on_yaw_sweep_conserves_count():
    ds = generate_synthetic(SyntheticConfig(n_samples=300, seed=2))
    coeffs = ShapeModel().fit(ds.shapes).pose_coefficients(ds.shapes)
    assert build_histogram(coeffs, 17).counts.sum() == 300


# --------------------------------------------------------------------------
# balance


def test_max_fill_example():
    coeffs = [0.1] * 10 + [1.5] * 2 + [2.5] * 7 + [3.0]
    man = balance(tiny_dataset(20), FixedPose(coeffs), 3, rng_seed=1)
    np.testing.assert_array_equal(man.histogram.counts, [10, 2, 8])
    np.testing.assert_array_equal(man.bin_counts(), [10, 10, 10])
    assert len(man.entries) == 30
    assert man.n_duplicates == 10


def test_already_uniform_has_no_duplicates():
    coeffs = np.repeat([0.0, 1.0, 2.0], 4)
    man = balance(tiny_dataset(12), FixedPose(coeffs), 3)
    assert man.n_duplicates == 0
    assert [sid for sid, _ in man.entries] == tiny_dataset(12).ids


def test_empty_bins_stay_empty_and_round_robin():
    coeffs = [0.0] * 9 + [3.0]
    ds = tiny_dataset(10)
    man = balance(ds, FixedPose(coeffs), 3, rng_seed=4)
    np.testing.assert_array_equal(man.bin_counts(), [9, 0, 9])
    dup_ids = [sid for sid, spec in man.entries if not spec.is_identity]
    assert dup_ids == [ds.ids[9]] * 8


def test_duplicates_cycle_through_bin_members():
    coeffs = [0.0] * 10 + [3.0] * 3
    ds = tiny_dataset(13)
    man = balance(ds, FixedPose(coeffs), 2, rng_seed=0)
    dups = [sid for sid, spec in man.entries if not spec.is_identity]
    assert len(dups) == 7
    # round robin: every member used twice before any is used a third time
    counts = {sid: dups.count(sid) for sid in set(dups)}
    assert sorted(counts.values()) == [2, 2, 3]
    assert dups[:3] == dups[3:6]


def test_fill_mean():
    coeffs = [0.1] * 10 + [1.5] * 2 + [2.5] * 7 + [3.0]
    man = balance(tiny_dataset(20), FixedPose(coeffs), 3, fill="mean")
    # target = ceil(20 / 3) = 7; bins above target are not trimmed
    np.testing.assert_array_equal(man.bin_counts(), [10, 7, 8])


def test_balance_is_deterministic(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n_samples=200, pose_distribution="skewed", seed=3))
    model = ShapeModel().fit(ds.shapes)
    a = balance(ds, model, 9, rng_seed=7)
    b = balance(ds, model, 9, rng_seed=7)
    a.save(tmp_path / "a.txt")
    b.save(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert balance(ds, model, 9, rng_seed=8).to_text() != a.to_text()
    assert read_manifest_entries(tmp_path / "a.txt") == a.entries
    assert len(set(a.bin_counts())) == 1


def test_balance_rejects_empty():
    with pytest.raises(DatasetError):
        balance(None, FixedPose([]), 3)


def test_duplicate_specs_within_configured_ranges():
    cfg = AugmentationConfig(max_rotation=10, max_jitter=0.05, blur_sigma=1.0)
    rng = np.random.default_rng(0)
    specs = [cfg.random_spec(rng) for _ in range(300)]
    assert all(abs(s.rotation) <= 10 for s in specs)
    assert all(max(map(abs, s.bbox_jitter)) <= 0.05 for s in specs)
    assert {s.blur_sigma for s in specs} == {0.0, 1.0}
    assert 0.35 < np.mean([s.flip for s in specs]) < 0.65
    with pytest.raises(AugmentationConfigError):
        AugmentationConfig(max_jitter=0.1)


# --------------------------------------------------------------------------
# augmentation


def sample():
    ds = generate_synthetic(SyntheticConfig(n_samples=1, seed=9, pixel_noise=0.0))
    return ds.images[0], ds.shapes[0], ds.bboxes[0]


def test_identity_spec_leaves_sample_unchanged():
    img, shp, box = sample()
    out_img, out_shp, out_box = apply_augmentation(img, shp, box, AugmentationSpec(), SYM5)
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_shp, shp)
    np.testing.assert_array_equal(out_box, box)


def test_double_flip_restores_landmarks():
    img, shp, box = sample()
    flip = AugmentationSpec(flip=True)
    _, once, box1 = apply_augmentation(img, shp, box, flip, SYM5)
    assert not np.allclose(once, shp)
    _, twice, _ = apply_augmentation(img, once, box1, flip, SYM5)
    np.testing.assert_allclose(twice, shp, atol=1e-9)


def test_rotation_inverse_restores_landmarks():
    img, shp, box = sample()
    _, rotated, box1 = apply_augmentation(img, shp, box, AugmentationSpec(rotation=23.0), SYM5)
    _, back, _ = apply_augmentation(img, rotated, box1, AugmentationSpec(rotation=-23.0), SYM5)
    np.testing.assert_allclose(back, shp, atol=1e-6)


def test_flip_uses_symmetry_map():
    img, shp, box = sample()
    _, out, _ = apply_augmentation(img, shp, box, AugmentationSpec(flip=True), SYM5)
    cx = (box[0] + box[2]) / 2
    # left eye of the output is the mirrored right eye of the input
    np.testing.assert_allclose(out[0], [2 * cx - shp[1, 0], shp[1, 1]])


def test_bad_symmetry_is_config_error():
    img, shp, box = sample()
    with pytest.raises(AugmentationConfigError):
        apply_augmentation(img, shp, box, AugmentationSpec(flip=True), [1, 2, 0, 3, 4])


@settings(max_examples=30, deadline=None)
@given(rot=st.floats(-30, 30), flip=st.booleans(), jit=st.tuples(*[st.floats(-0.05, 0.05)] * 4))
def test_landmarks_follow_geometric_map_exactly(rot, flip, jit):
    img, shp, box = sample()
    spec = AugmentationSpec(rot, flip, jit, 0.0)
    _, out, new_box = apply_augmentation(img, shp, box, spec, SYM5)
    A, b = spec.point_map(box)
    expected = shp @ A.T + b
    if flip:
        expected = expected[SYM5]
    np.testing.assert_array_equal(out, expected)
    w, h = box[2] - box[0], box[3] - box[1]
    np.testing.assert_allclose(new_box, box + np.array(jit) * [w, h, w, h])


def test_image_content_follows_landmarks():
    size = 32
    point = np.array([[20.0, 11.0]])
    img = render_blobs(point, size, sigma=1.5, amplitude=1.0)
    box = full_image_bbox(size, size)
    spec = AugmentationSpec(rotation=25.0, flip=True)
    out_img, out_pt, _ = apply_augmentation(img, point, box, spec, [0])
    ys, xs = np.mgrid[0:size, 0:size]
    w = out_img[..., 0]
    centroid = np.array([np.sum(w * xs), np.sum(w * ys)]) / w.sum()
    np.testing.assert_allclose(centroid, out_pt[0], atol=0.05)


def test_blur_properties():
    img = np.zeros((15, 15, 1))
    img[7, 7] = 1.0
    out = blur(img, 1.0)
    assert out.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(out[..., 0], out[..., 0].T)
    assert blur(img, 0.0) is img


def test_materialize_identity_matches_crop():
    ds = generate_synthetic(SyntheticConfig(n_samples=3, seed=1))
    X, Y = materialize(ds, identity_manifest(ds), 32)
    assert X.shape == (3, 32, 32, 1) and Y.shape == (3, 10)
    # full-image box at native size: resampling reproduces the image
    np.testing.assert_allclose(X, ds.images, atol=1e-12)
    np.testing.assert_allclose(Y[:, :5] * 32 - 0.5, ds.shapes[:, :, 0], atol=1e-12)
