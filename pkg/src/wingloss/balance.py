"""Pose-based data balancing.

Training shapes are projected onto the pose axis of a :class:`ShapeModel`,
binned into a ``K``-bin histogram, and under-populated bins are topped up
with perturbed duplicates of their own samples.  The result is a manifest of
``(sample id, augmentation)`` entries; images are only touched when the
manifest is materialised.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .data import Dataset, DatasetError, check_symmetry
from .geometry import affine_warp, crop_samples
from .shapes import ShapeModel, rotation_matrix, to_vector

MANIFEST_HEADER = "# wingloss-manifest v1"


class AugmentationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PoseHistogram:
    edges: np.ndarray
    counts: np.ndarray
    assignments: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.counts)


def build_histogram(coeffs, n_bins) -> PoseHistogram:
    """Equal-width histogram over ``[min, max]`` of ``coeffs``.

    The maximum lands in the last bin.  If all coefficients are equal the
    range is widened to ``value +/- 0.5``.
    """
    coeffs = np.asarray(coeffs, dtype=float).ravel()
    if n_bins < 1:
        raise ValueError("histogram needs at least one bin")
    if coeffs.size == 0:
        raise ValueError("cannot build a histogram of no coefficients")
    lo, hi = float(coeffs.min()), float(coeffs.max())
    if hi - lo <= 0:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, n_bins + 1)
    width = (hi - lo) / n_bins
    assignments = np.clip(np.floor((coeffs - lo) / width).astype(int), 0, n_bins - 1)
    counts = np.bincount(assignments, minlength=n_bins)
    return PoseHistogram(edges, counts, assignments)


@dataclass(frozen=True)
class AugmentationSpec:
    """One perturbation recipe: rotation (deg) about the box centre, optional
    horizontal flip, box-corner jitter as fractions of box size, optional blur.
    """

    rotation: float = 0.0
    flip: bool = False
    bbox_jitter: tuple = (0.0, 0.0, 0.0, 0.0)
    blur_sigma: float = 0.0
    seed: int = 0

    @property
    def is_identity(self) -> bool:
        return (
            self.rotation == 0.0
            and not self.flip
            and not any(self.bbox_jitter)
            and self.blur_sigma == 0.0
        )

    def point_map(self, bbox):
        """Return ``(A, b)`` so that augmented points are ``A @ p + b``."""
        x1, y1, x2, y2 = bbox
        centre = np.array([(x1 + x2) / 2, (y1 + y2) / 2])
        A = rotation_matrix(math.radians(self.rotation))
        if self.flip:
            A = np.diag([-1.0, 1.0]) @ A
        return A, centre - A @ centre


@dataclass
class AugmentationConfig:
    """Ranges for randomised specs (defaults follow the stage-1 recipe)."""

    max_rotation: float = 30.0
    flip_probability: float = 0.5
    max_jitter: float = 0.05
    blur_probability: float = 0.5
    blur_sigma: float = 1.0

    def __post_init__(self):
        if not 0 <= self.max_jitter <= 0.05:
            raise AugmentationConfigError("box jitter is limited to 5% of the box size")
        if self.max_rotation < 0 or self.blur_sigma < 0:
            raise AugmentationConfigError("rotation range and blur sigma must be non-negative")

    def random_spec(self, rng) -> AugmentationSpec:
        rotation = float(rng.uniform(-self.max_rotation, self.max_rotation))
        flip = bool(rng.random() < self.flip_probability)
        jitter = tuple(float(v) for v in rng.uniform(-self.max_jitter, self.max_jitter, 4))
        blur = self.blur_sigma if rng.random() < self.blur_probability else 0.0
        seed = int(rng.integers(0, 2**31 - 1))
        return AugmentationSpec(rotation, flip, jitter, float(blur), seed)


@dataclass
class BalancedManifest:
    entries: list
    histogram: PoseHistogram
    config: dict = field(default_factory=dict)

    def bin_counts(self) -> np.ndarray:
        """Entries per histogram bin (duplicates counted in their source's bin)."""
        index = {sid: i for i, sid in enumerate(self.config["ids"])}
        bins = [self.histogram.assignments[index[sid]] for sid, _ in self.entries]
        return np.bincount(bins, minlength=self.histogram.n_bins)

    @property
    def n_duplicates(self) -> int:
        return sum(1 for _, spec in self.entries if not spec.is_identity)

    def to_text(self) -> str:
        cfg = {k: v for k, v in self.config.items() if k != "ids"}
        lines = [
            MANIFEST_HEADER,
            "# " + " ".join(f"{k}={v}" for k, v in sorted(cfg.items())),
            "# edges " + " ".join(repr(float(e)) for e in self.histogram.edges),
            "# counts " + " ".join(str(int(c)) for c in self.histogram.counts),
        ]
        for sid, s in self.entries:
            fields = [sid, repr(s.rotation), str(int(s.flip)), *(repr(j) for j in s.bbox_jitter),
                      repr(s.blur_sigma), str(s.seed)]
            lines.append(" ".join(fields))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def read_manifest_entries(path):
    """Parse the entry lines of a saved manifest into ``(id, spec)`` pairs."""
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
            sid, rot, flip, jx1, jy1, jx2, jy2, sigma, seed = parts
            spec = AugmentationSpec(
                float(rot), flip == "1", (float(jx1), float(jy1), float(jx2), float(jy2)),
                float(sigma), int(seed),
            )
            entries.append((sid, spec))
    return entries


def balance(dataset: Dataset, model: ShapeModel, n_bins, rng_seed=0, fill="max",
            augmentation: AugmentationConfig | None = None) -> BalancedManifest:
    """Balance ``dataset`` over the pose histogram of ``model``.

    Every non-empty bin is filled up to the largest bin's count (``fill="max"``)
    or to the rounded-up mean occupancy of non-empty bins (``fill="mean"``).
    Duplicates cycle through each bin's samples in a seeded random order and
    each carries a fresh random :class:`AugmentationSpec`; originals carry the
    identity spec.
    """
    if dataset is None or len(dataset) == 0:
        raise DatasetError("cannot balance an empty dataset")
    if fill not in ("max", "mean"):
        raise ValueError(f"fill must be 'max' or 'mean', got {fill!r}")
    augmentation = augmentation or AugmentationConfig()
    coeffs = model.pose_coefficients(dataset.shapes)
    hist = build_histogram(coeffs, n_bins)
    rng = np.random.default_rng(rng_seed)

    occupied = hist.counts[hist.counts > 0]
    target = int(occupied.max()) if fill == "max" else int(math.ceil(occupied.mean()))

    entries = [(sid, AugmentationSpec()) for sid in dataset.ids]
    for b in range(hist.n_bins):
        members = np.flatnonzero(hist.assignments == b)
        missing = target - len(members)
        if len(members) == 0 or missing <= 0:
            continue
        order = rng.permutation(members)
        for k in range(missing):
            sid = dataset.ids[order[k % len(order)]]
            entries.append((sid, augmentation.random_spec(rng)))

    config = {
        "n_bins": n_bins,
        "fill": fill,
        "seed": rng_seed,
        "pose_component": model.pose_component,
        **{f"aug_{k}": v for k, v in asdict(augmentation).items()},
        "ids": list(dataset.ids),
    }
    return BalancedManifest(entries, hist, config)


def identity_manifest(dataset: Dataset) -> BalancedManifest:
    """Manifest listing every sample once, unperturbed."""
    hist = build_histogram(np.zeros(len(dataset)), 1)
    return BalancedManifest([(sid, AugmentationSpec()) for sid in dataset.ids], hist,
                            {"n_bins": 1, "fill": "none", "ids": list(dataset.ids)})


def blur(image, sigma):
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, reflect padding."""
    if sigma <= 0:
        return image
    radius = int(math.ceil(3 * sigma))
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        out[..., ch] = ndimage.gaussian_filter(image[..., ch], sigma, mode="reflect", radius=radius)
    return out


def apply_augmentation(image, shape, bbox, spec: AugmentationSpec, symmetry):
    """Apply ``spec`` to one sample.

    Returns ``(image, shape, bbox)``.  Landmarks are mapped analytically by
    the same affine map used to warp the image; a flip also reorders them
    through ``symmetry``.
    """
    try:
        symmetry = check_symmetry(symmetry, len(shape))
    except DatasetError as exc:
        raise AugmentationConfigError(str(exc)) from None
    shape = np.asarray(shape, dtype=float)
    bbox = np.asarray(bbox, dtype=float)
    if spec.is_identity:
        return image, shape.copy(), bbox.copy()

    A, b = spec.point_map(bbox)
    new_shape = shape @ A.T + b
    if spec.flip:
        new_shape = new_shape[symmetry]
    if spec.rotation != 0.0 or spec.flip:
        image = affine_warp(image, A, b)
    w, h = bbox[2] - bbox[0], bbox[3] - bbox[1]
    new_bbox = bbox + np.array(spec.bbox_jitter) * np.array([w, h, w, h])
    image = blur(image, spec.blur_sigma)
    return image, new_shape, new_bbox


def materialize(dataset: Dataset, manifest: BalancedManifest, input_size):
    """Apply every manifest entry and crop to the network input size.

    Returns ``(X, Y)``: crops ``(M, S, S, C)`` and shape vectors ``(M, 2L)`` in
    crop-normalised coordinates.
    """
    index = {sid: i for i, sid in enumerate(dataset.ids)}
    images, shapes, boxes = [], [], []
    for sid, spec in manifest.entries:
        if sid not in index:
            raise DatasetError(f"manifest references unknown sample {sid!r}")
        i = index[sid]
        img, shp, box = apply_augmentation(
            dataset.images[i], dataset.shapes[i], dataset.bboxes[i], spec, dataset.symmetry
        )
        images.append(img)
        shapes.append(shp)
        boxes.append(box)
    X, Y = crop_samples(images, shapes, boxes, input_size)
    return X, to_vector(Y)
