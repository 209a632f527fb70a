"""Landmark shapes, similarity alignment and a PCA shape model.

A shape is an ``(L, 2)`` float array of ``(x, y)`` landmark positions.  The
flat *shape vector* layout is ``[x_1 .. x_L, y_1 .. y_L]``, see
:func:`to_vector` / :func:`from_vector`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

MODEL_HEADER = "wingloss-shape-model v1"


class AlignmentError(ValueError):
    """Raised for degenerate shapes (all landmarks coincident)."""


def as_points(shape) -> np.ndarray:
    """Validate and return a shape as an ``(L, 2)`` float array.

    Shape vectors of length ``2L`` are accepted and unpacked.
    """
    arr = np.asarray(shape, dtype=float)
    if arr.ndim == 1:
        if arr.size % 2:
            raise ValueError("shape vector must have even length")
        arr = from_vector(arr)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (L, 2) landmarks, got array of shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError("a shape needs at least 2 landmarks")
    if not np.all(np.isfinite(arr)):
        raise ValueError("landmark coordinates must be finite")
    return arr


def to_vector(points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.concatenate([points[..., 0], points[..., 1]], axis=-1)


def from_vector(vec) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    n = vec.shape[-1] // 2
    return np.stack([vec[..., :n], vec[..., n:]], axis=-1)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def wrap_angle(theta: float) -> float:
    """Map an angle to (-pi, pi]."""
    wrapped = math.remainder(theta, 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R(rotation) @ p + translation``; no reflection."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")
        object.__setattr__(self, "rotation", wrap_angle(float(self.rotation)))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @property
    def matrix(self) -> np.ndarray:
        return self.scale * rotation_matrix(self.rotation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.matrix.T + np.asarray(self.translation)

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        t = -inv_scale * rotation_matrix(-self.rotation) @ np.asarray(self.translation)
        return SimilarityTransform(inv_scale, -self.rotation, tuple(t))


def _spread(centered) -> float:
    return float(np.sum(centered**2))


def _rotation_terms(x_centered, y_centered):
    """Return ``(a, b)`` with ``atan2(b, a)`` the optimal rotation of x onto y."""
    a = float(np.sum(x_centered * y_centered))
    b = float(np.sum(x_centered[:, 0] * y_centered[:, 1] - x_centered[:, 1] * y_centered[:, 0]))
    return a, b


def procrustes_align(shape, reference):
    """Least-squares similarity alignment of ``shape`` onto ``reference``.

    Returns
    -------
    aligned : ndarray of shape (L, 2)
    transform : SimilarityTransform
        The map taking ``shape`` to ``aligned``.
    """
    x = as_points(shape)
    y = as_points(reference)
    if x.shape != y.shape:
        raise ValueError(f"landmark counts differ: {x.shape[0]} vs {y.shape[0]}")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sx = _spread(xc)
    if sx <= 1e-300 or _spread(yc) <= 1e-300:
        raise AlignmentError("cannot align a degenerate shape (zero spread)")
    a, b = _rotation_terms(xc, yc)
    theta = math.atan2(b, a)
    scale = math.hypot(a, b) / sx
    if scale <= 0:
        raise AlignmentError("alignment produced a non-positive scale")
    rot = rotation_matrix(theta)
    t = my - scale * rot @ mx
    transform = SimilarityTransform(scale, theta, tuple(t))
    return transform.apply(x), transform


def normalize_shape(shape) -> np.ndarray:
    """Zero centroid and unit mean point-to-centroid distance."""
    x = as_points(shape)
    xc = x - x.mean(axis=0)
    size = float(np.mean(np.linalg.norm(xc, axis=1)))
    if size <= 1e-300:
        raise AlignmentError("cannot normalise a degenerate shape")
    return xc / size


@dataclass
class MeanShapeResult:
    mean: np.ndarray
    converged: bool
    n_iter: int


# ratio of the minor to the major principal spread below which a shape
# counts as collapsed onto a line
FLAT_LIMIT = 1e-2


def flatness(shape) -> float:
    """Minor over major singular value of the centred landmarks."""
    x = as_points(shape)
    sv = np.linalg.svd(x - x.mean(axis=0), compute_uv=False)
    return float(sv[1] / sv[0]) if sv[0] > 0 else 0.0


def mean_shape(shapes, tol=1e-8, max_iter=100, return_info=False):
    """Generalised Procrustes mean of a set of shapes.

    All shapes are repeatedly aligned to the current estimate and averaged.
    The estimate is kept at zero centroid and unit mean centroid distance.
    Iteration stops when the estimate moves less than ``tol`` or after
    ``max_iter`` rounds.  If the average starts collapsing onto a line (as
    a shape and its mirror image do, since reflection is not part of the
    alignment), iteration stops at the last non-collinear estimate with
    ``converged=False``; pass ``return_info=True`` to see the flag.
    """
    shapes = [as_points(s) for s in shapes]
    if not shapes:
        raise ValueError("mean_shape needs at least one shape")
    n_landmarks = shapes[0].shape[0]
    if any(s.shape[0] != n_landmarks for s in shapes):
        raise ValueError("all shapes must have the same number of landmarks")

    normalized = [normalize_shape(s) for s in shapes]
    planar = any(flatness(s) >= FLAT_LIMIT for s in normalized)
    try:
        mean = normalize_shape(np.mean(normalized, axis=0))
    except AlignmentError:
        mean = normalized[0]
    if planar and flatness(mean) < FLAT_LIMIT:
        mean = normalized[0] if flatness(normalized[0]) >= FLAT_LIMIT else \
            max(normalized, key=flatness)

    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        aligned = [procrustes_align(s, mean)[0] for s in normalized]
        try:
            new_mean = normalize_shape(np.mean(aligned, axis=0))
        except AlignmentError:
            break
        if planar and flatness(new_mean) < FLAT_LIMIT:
            # collapsing towards a line: mirror-image inputs pull the average flat
            break
        moved = float(np.max(np.abs(new_mean - mean)))
        mean = new_mean
        if moved < tol:
            converged = True
            break

    if return_info:
        return MeanShapeResult(mean, converged, n_iter)
    return mean


def tangent_align(shape, reference):
    """Remove translation, rotation and scale of ``shape`` relative to ``reference``.

    Rotation is the least-squares Procrustes rotation.  Scale is chosen so the
    result projects onto ``reference`` with unit coefficient, which places all
    aligned shapes on the tangent plane through the reference.  Any shape of
    the form ``reference + d`` with ``d`` orthogonal to the similarity orbit is
    returned unchanged.
    """
    x = as_points(shape)
    y = as_points(reference)
    if x.shape != y.shape:
        raise ValueError(f"landmark counts differ: {x.shape[0]} vs {y.shape[0]}")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    if _spread(xc) <= 1e-300:
        raise AlignmentError("cannot align a degenerate shape (zero spread)")
    a, b = _rotation_terms(xc, yc)
    theta = math.atan2(b, a)
    rotated = xc @ rotation_matrix(theta).T
    proj = float(np.sum(rotated * yc))
    if proj <= 0:
        raise AlignmentError("shape is orthogonal to the reference")
    return rotated * (_spread(yc) / proj) + y.mean(axis=0)


class ShapeModel(TransformerMixin, BaseEstimator):
    """PCA shape model over Procrustes-aligned shapes.

    Parameters
    ----------
    pose_component : int, default=0
        Index of the principal component treated as the pose axis.
    tol, max_iter :
        Convergence settings for the Procrustes mean.

    Attributes
    ----------
    reference_ : ndarray (L, 2)
        Normalised Procrustes mean; the alignment target.
    mean_ : ndarray (2L,)
        Mean of the aligned shape vectors.
    components_ : ndarray (k, 2L)
        Orthonormal eigenvectors, rows sorted by decreasing eigenvalue.
    explained_variance_ : ndarray (k,)
    """

    def __init__(self, pose_component=0, tol=1e-8, max_iter=100):
        self.pose_component = pose_component
        self.tol = tol
        self.max_iter = max_iter

    def _points_list(self, shapes):
        arr = np.asarray(shapes, dtype=float)
        if arr.ndim == 2:
            arr = from_vector(arr)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError("expected shapes as (N, L, 2) or (N, 2L)")
        return [as_points(s) for s in arr]

    def fit(self, X, y=None):
        shapes = self._points_list(X)
        if len(shapes) < 2:
            raise ValueError("fitting a shape model needs at least 2 shapes")
        info = mean_shape(shapes, tol=self.tol, max_iter=self.max_iter, return_info=True)
        self.reference_ = info.mean
        self.converged_ = info.converged
        aligned = np.array([to_vector(tangent_align(s, self.reference_)) for s in shapes])
        self.mean_ = aligned.mean(axis=0)
        centered = aligned - self.mean_
        _, sing, vt = np.linalg.svd(centered, full_matrices=False)
        self.explained_variance_ = sing**2 / len(shapes)
        # deterministic sign: largest-magnitude entry of each component positive
        idx = np.argmax(np.abs(vt), axis=1)
        signs = np.sign(vt[np.arange(len(vt)), idx])
        signs[signs == 0] = 1.0
        self.components_ = vt * signs[:, None]
        self.total_variance_ = float(np.sum(centered.var(axis=0)))
        self.n_landmarks_ = shapes[0].shape[0]
        if not 0 <= self.pose_component < len(self.components_):
            raise ValueError(
                f"pose_component {self.pose_component} out of range for "
                f"{len(self.components_)} components"
            )
        return self

    @property
    def pose_vector(self) -> np.ndarray:
        check_is_fitted(self, "components_")
        return self.components_[self.pose_component]

    def _align_vectors(self, X):
        check_is_fitted(self, "components_")
        shapes = self._points_list(X)
        if shapes and shapes[0].shape[0] != self.n_landmarks_:
            raise ValueError(
                f"model has {self.n_landmarks_} landmarks, shape has {shapes[0].shape[0]}"
            )
        return np.array([to_vector(tangent_align(s, self.reference_)) for s in shapes])

    def transform(self, X):
        """Coefficients of each shape on every principal component."""
        return (self._align_vectors(X) - self.mean_) @ self.components_.T

    def pose_coefficients(self, X) -> np.ndarray:
        return (self._align_vectors(X) - self.mean_) @ self.pose_vector

    def pose_coefficient(self, shape) -> float:
        return float(self.pose_coefficients([as_points(shape)])[0])

    def inverse_transform(self, coeffs):
        coeffs = np.atleast_2d(coeffs)
        k = coeffs.shape[1]
        return self.mean_ + coeffs @ self.components_[:k]

    def save(self, path):
        check_is_fitted(self, "components_")
        lines = [
            MODEL_HEADER,
            f"landmarks {self.n_landmarks_} components {len(self.components_)} "
            f"pose_component {self.pose_component}",
            "reference " + " ".join(repr(float(v)) for v in to_vector(self.reference_)),
            "mean " + " ".join(repr(float(v)) for v in self.mean_),
        ]
        for val, vec in zip(self.explained_variance_, self.components_):
            lines.append(" ".join(repr(float(v)) for v in (val, *vec)))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ShapeModel":
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != MODEL_HEADER:
            raise ValueError(f"{path}: not a shape model file (bad header)")
        head = lines[1].split()
        if head[0::2] != ["landmarks", "components", "pose_component"]:
            raise ValueError(f"{path}: malformed model header line")
        n_landmarks, n_comp, pose = (int(v) for v in head[1::2])
        model = cls(pose_component=pose)
        ref = lines[2].split()
        mean = lines[3].split()
        if ref[0] != "reference" or mean[0] != "mean":
            raise ValueError(f"{path}: missing reference/mean rows")
        model.reference_ = from_vector(np.array(ref[1:], dtype=float))
        model.mean_ = np.array(mean[1:], dtype=float)
        rows = np.array([ln.split() for ln in lines[4 : 4 + n_comp]], dtype=float)
        if rows.shape != (n_comp, 2 * n_landmarks + 1):
            raise ValueError(f"{path}: eigenvector block has shape {rows.shape}")
        model.explained_variance_ = rows[:, 0]
        model.components_ = rows[:, 1:]
        model.n_landmarks_ = n_landmarks
        model.converged_ = True
        model.total_variance_ = float(np.sum(model.explained_variance_))
        return model


def fit_shape_model(shapes, pose_component=0) -> ShapeModel:
    return ShapeModel(pose_component=pose_component).fit(shapes)


def pose_coefficient(model: ShapeModel, shape) -> float:
    return model.pose_coefficient(shape)
