import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from wingloss.data import SyntheticConfig, generate_synthetic
from wingloss.shapes import (
    AlignmentError,
    ShapeModel,
    SimilarityTransform,
    fit_shape_model,
    flatness,
    from_vector,
    mean_shape,
    normalize_shape,
    pose_coefficient,
    procrustes_align,
    rotation_matrix,
    to_vector,
)


def random_shape(rng, n=5):
    return rng.normal(size=(n, 2)) * 10 + rng.uniform(-50, 50, 2)


def orbit_basis(shape):
    """Orthonormal basis of the similarity-orbit tangent at a centred shape."""
    n = len(shape)
    v = to_vector(shape)
    rot = to_vector(shape @ rotation_matrix(math.pi / 2).T)
    dirs = [np.r_[np.ones(n), np.zeros(n)], np.r_[np.zeros(n), np.ones(n)], v, rot]
    q, _ = np.linalg.qr(np.array(dirs).T)
    return q


def orthogonal_direction(shape, rng):
    q = orbit_basis(shape)
    v = rng.normal(size=2 * len(shape))
    v -= q @ (q.T @ v)
    return v / np.linalg.norm(v)


def sq_residual(a, b):
    return float(np.sum((a - b) ** 2))


# --------------------------------------------------------------------------
# Procrustes


def test_align_identity():
    rng = np.random.default_rng(0)
    s = random_shape(rng)
    aligned, t = procrustes_align(s, s)
    assert abs(t.scale - 1) < 1e-9
    assert abs(t.rotation) < 1e-9
    assert np.allclose(t.translation, 0, atol=1e-9)
    assert np.allclose(aligned, s, atol=1e-9)


def test_align_recovers_rotation_and_scale():
    rng = np.random.default_rng(1)
    s = random_shape(rng)
    truth = SimilarityTransform(2.0, math.radians(30), (4.0, -7.0))
    _, t = procrustes_align(s, truth.apply(s))
    assert abs(t.scale - 2.0) < 1e-6
    assert abs(t.rotation - math.radians(30)) < 1e-6
    assert np.allclose(t.translation, (4.0, -7.0), atol=1e-6)


def test_aligning_an_aligned_shape_is_identity():
    rng = np.random.default_rng(2)
    s, ref = random_shape(rng), random_shape(rng)
    aligned, _ = procrustes_align(s, ref)
    _, again = procrustes_align(aligned, ref)
    assert abs(again.scale - 1) < 1e-9 and abs(again.rotation) < 1e-9
    assert np.allclose(again.translation, 0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_alignment_never_increases_residual(seed):
    rng = np.random.default_rng(seed)
    s, ref = random_shape(rng), random_shape(rng)
    aligned, t = procrustes_align(s, ref)
    assert sq_residual(aligned, ref) <= sq_residual(s, ref) + 1e-9
    assert np.allclose(t.apply(s), aligned)


@pytest.mark.parametrize("seed", range(5))
def test_procrustes_beats_grid_search(seed):
    rng = np.random.default_rng(seed)
    s = random_shape(rng, 4)
    truth = SimilarityTransform(rng.uniform(0.5, 2.0), rng.uniform(-math.pi, math.pi), rng.normal(size=2))
    ref = truth.apply(s) + rng.normal(scale=3.0, size=s.shape)
    aligned, t = procrustes_align(s, ref)
    best = sq_residual(aligned, ref)
    sc, rc = s - s.mean(axis=0), ref - ref.mean(axis=0)
    # translation is optimal at matched centroids for any scale and rotation
    thetas = np.linspace(-math.pi, math.pi, 721)
    scales = np.linspace(0.05, 3.0, 600)
    rotated = np.einsum("tij,lj->tli", np.array([rotation_matrix(a) for a in thetas]), sc)
    cross = np.einsum("tli,li->t", rotated, rc)
    norm = np.sum(sc**2)
    grid = (scales[None, :] ** 2) * norm - 2 * scales[None, :] * cross[:, None] + np.sum(rc**2)
    assert grid.min() >= best - 1e-9
    # grid steps: 0.5 degree and ~0.005 in scale
    assert grid.min() - best <= 1e-2 * np.sum(rc**2)
    i, j = np.unravel_index(np.argmin(grid), grid.shape)
    assert abs(thetas[i] - t.rotation) <= math.radians(0.5) + 1e-12
    assert abs(scales[j] - t.scale) <= 0.005 + 1e-12


def test_degenerate_shape_rejected():
    with pytest.raises(AlignmentError):
        procrustes_align(np.ones((4, 2)), np.eye(4, 2))
    with pytest.raises(AlignmentError):
        normalize_shape(np.zeros((3, 2)))


def test_similarity_transform_inverse_and_wrap():
    t = SimilarityTransform(1.5, 3 * math.pi, (1.0, 2.0))
    assert t.rotation == pytest.approx(math.pi)
    pts = np.random.default_rng(0).normal(size=(5, 2))
    assert np.allclose(t.inverse().apply(t.apply(pts)), pts)
    with pytest.raises(ValueError):
        SimilarityTransform(0.0)


# --------------------------------------------------------------------------
# mean shape


def test_mean_of_identical_shapes():
    rng = np.random.default_rng(3)
    s = random_shape(rng)
    m = mean_shape([s, s, s])
    assert np.allclose(m, normalize_shape(s), atol=1e-9)
    assert np.allclose(m.mean(axis=0), 0, atol=1e-12)
    assert np.mean(np.linalg.norm(m, axis=1)) == pytest.approx(1.0)


@pytest.mark.parametrize("theta_deg", [4.0, 10.0, 20.0])
def test_mean_of_shape_and_rotation_is_half_rotation(theta_deg):
    rng = np.random.default_rng(4)
    s = random_shape(rng, 6)
    theta = math.radians(theta_deg)
    m = mean_shape([s, s @ rotation_matrix(theta).T])
    base = normalize_shape(s)
    # brute-force oracle: the rotation of the normalised shape closest to the mean
    angles = np.linspace(-math.pi, math.pi, 200_001)
    cross = np.sum(base * m)
    perp = np.sum(base[:, 0] * m[:, 1] - base[:, 1] * m[:, 0])
    dist = 2 * np.sum(base**2) - 2 * (np.cos(angles) * cross + np.sin(angles) * perp)
    best = angles[np.argmin(dist)]
    assert abs(best - theta / 2) < 1e-4
    assert np.allclose(m, base @ rotation_matrix(theta / 2).T, atol=1e-8)


def test_mirror_pair_flags_non_convergence():
    tri = np.array([[0.0, 0.0], [2.0, 0.0], [0.5, 1.5]])
    info = mean_shape([tri, tri * [-1, 1]], return_info=True)
    assert not info.converged
    assert np.all(np.isfinite(info.mean))
    assert flatness(info.mean) > 1e-3


def test_mean_shape_needs_shapes():
    with pytest.raises(ValueError):
        mean_shape([])


# --------------------------------------------------------------------------
# shape model


def rank_one_data(seed=5, n=6):
    rng = np.random.default_rng(seed)
    base = normalize_shape(rng.normal(size=(n, 2)))
    v = orthogonal_direction(base, rng)
    ts = np.linspace(-0.3, 0.3, 13)
    return [from_vector(to_vector(base) + t * v) for t in ts], v


def test_rank_one_recovery():
    shapes, v = rank_one_data()
    model = fit_shape_model(shapes)
    assert min(np.linalg.norm(model.components_[0] - v), np.linalg.norm(model.components_[0] + v)) < 1e-6
    assert model.explained_variance_[1] < 1e-12


def test_pca_identities():
    rng = np.random.default_rng(6)
    base = random_shape(rng, 6)
    shapes = [base + rng.normal(scale=0.8, size=base.shape) for _ in range(40)]
    model = ShapeModel().fit(shapes)
    comps = model.components_
    assert np.allclose(comps @ comps.T, np.eye(len(comps)), atol=1e-8)
    assert np.all(np.diff(model.explained_variance_) <= 1e-15)
    assert np.all(model.explained_variance_ >= 0)
    aligned = model._align_vectors(shapes)
    total = float(np.sum(aligned.var(axis=0)))
    assert abs(model.explained_variance_.sum() - total) < 1e-8


def test_pose_coefficient_examples():
    rng = np.random.default_rng(7)
    base = random_shape(rng, 6)
    shapes = [base + rng.normal(scale=0.8, size=base.shape) for _ in range(30)]
    model = ShapeModel().fit(shapes)
    mean = from_vector(model.mean_)
    assert abs(pose_coefficient(model, mean)) < 1e-9
    shifted = from_vector(model.mean_ + 3 * model.pose_vector)
    assert abs(pose_coefficient(model, shifted) - 3.0) < 1e-6


@settings(max_examples=40, deadline=None)
@given(
    scale=st.floats(0.2, 5.0),
    angle=st.floats(-math.pi, math.pi),
    tx=st.floats(-100, 100),
    ty=st.floats(-100, 100),
)
def test_pose_coefficient_similarity_invariant(scale, angle, tx, ty):
    rng = np.random.default_rng(8)
    base = random_shape(rng, 6)
    shapes = [base + rng.normal(scale=0.8, size=base.shape) for _ in range(20)]
    model = ShapeModel().fit(shapes)
    s = shapes[3]
    moved = SimilarityTransform(scale, angle, (tx, ty)).apply(s)
    assert abs(model.pose_coefficient(moved) - model.pose_coefficient(s)) < 1e-6


def test_mirrored_pose_negates_coefficient():
    cfg = SyntheticConfig(n_samples=21, shape_noise=0.0, expression_std=0.0, seed=3)
    sweep = generate_synthetic(cfg, pose=np.linspace(-1, 1, 21))
    model = ShapeModel().fit(sweep.shapes)
    pair = generate_synthetic(SyntheticConfig(n_samples=2, shape_noise=0.0, expression_std=0.0, seed=11),
                              pose=np.array([0.7, -0.7]))
    c = model.pose_coefficients(pair.shapes)
    assert abs(c[0] + c[1]) < 1e-6
    assert abs(c[0]) > 1e-3


def test_pose_coefficient_tracks_latent_pose():
    cfg = SyntheticConfig(n_samples=2, shape_noise=0.0, expression_std=0.0, seed=0)
    two = generate_synthetic(cfg, pose=np.array([1.0, -1.0]))
    model = ShapeModel().fit(two.shapes)
    sweep = generate_synthetic(SyntheticConfig(n_samples=200, shape_noise=0.0, expression_std=0.0, seed=1))
    r = np.corrcoef(model.pose_coefficients(sweep.shapes), sweep.latent_pose)[0, 1]
    assert abs(r) > 0.99


def test_model_landmark_mismatch():
    shapes, _ = rank_one_data()
    model = ShapeModel().fit(shapes)
    with pytest.raises(ValueError):
        model.pose_coefficient(np.zeros((5, 2)) + np.arange(5)[:, None])


def test_model_needs_two_shapes():
    with pytest.raises(ValueError):
        ShapeModel().fit([np.eye(3, 2)])


def test_model_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    base = random_shape(rng, 5)
    shapes = [base + rng.normal(scale=0.5, size=base.shape) for _ in range(15)]
    model = ShapeModel(pose_component=1).fit(shapes)
    path = tmp_path / "model.txt"
    model.save(path)
    loaded = ShapeModel.load(path)
    assert loaded.pose_component == 1
    np.testing.assert_array_equal(loaded.components_, model.components_)
    np.testing.assert_array_equal(loaded.explained_variance_, model.explained_variance_)
    np.testing.assert_array_equal(loaded.pose_coefficients(shapes), model.pose_coefficients(shapes))
    assert path.read_text().splitlines()[0] == "wingloss-shape-model v1"


def test_model_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a model\n")
    with pytest.raises(ValueError):
        ShapeModel.load(path)


def test_estimator_api():
    shapes, _ = rank_one_data()
    model = ShapeModel(pose_component=0)
    assert model.get_params() == {"pose_component": 0, "tol": 1e-8, "max_iter": 100}
    coeffs = clone(model).fit_transform(shapes)
    assert coeffs.shape[0] == len(shapes)
    recon = model.fit(shapes).inverse_transform(coeffs)
    assert np.allclose(recon, model._align_vectors(shapes), atol=1e-9)
    with pytest.raises(ValueError):
        ShapeModel(pose_component=99).fit(shapes)
