"""Landmark datasets: file formats and a synthetic face-like generator.

Coordinate convention: landmarks are stored 0-indexed in pixel units, with
pixel ``(i, j)`` (column, row) centred at ``(x, y) = (i, j)``.  An ``S x S``
image therefore spans ``[-0.5, S - 0.5]`` on each axis.  Point files in the
300-W style are 1-indexed on disk; loaders subtract 1 and writers add it back.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .shapes import as_points, rotation_matrix

logger = logging.getLogger(__name__)


class AnnotationParseError(ValueError):
    """Malformed landmark annotation file."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class DatasetError(ValueError):
    pass


def check_symmetry(symmetry, n_landmarks=None) -> np.ndarray:
    """Validate a landmark symmetry permutation (must be an involution)."""
    perm = np.asarray(symmetry, dtype=int)
    n = len(perm)
    if n_landmarks is not None and n != n_landmarks:
        raise DatasetError(f"symmetry map has {n} entries, expected {n_landmarks}")
    if sorted(perm.tolist()) != list(range(n)):
        raise DatasetError("symmetry map is not a permutation")
    if not np.array_equal(perm[perm], np.arange(n)):
        raise DatasetError("symmetry map is not an involution")
    return perm


def full_image_bbox(height, width):
    return np.array([-0.5, -0.5, width - 0.5, height - 0.5])


@dataclass
class Dataset:
    """Images with landmark shapes, face boxes and a symmetry map.

    ``images`` is an ``(N, H, W, C)`` float array in ``[0, 1]``.  ``bboxes``
    rows are ``(x1, y1, x2, y2)``.  ``latent_pose`` / ``roll`` are only set by
    the synthetic generator.
    """

    images: np.ndarray
    shapes: np.ndarray
    bboxes: np.ndarray
    symmetry: np.ndarray
    ids: list = None
    latent_pose: np.ndarray = None
    roll: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.shapes = np.asarray(self.shapes, dtype=float)
        self.bboxes = np.asarray(self.bboxes, dtype=float)
        n = len(self.images)
        if n == 0:
            raise DatasetError("dataset is empty")
        if self.shapes.ndim != 3 or self.shapes.shape[0] != n or self.shapes.shape[2] != 2:
            raise DatasetError(f"shapes must be (N, L, 2) with N={n}, got {self.shapes.shape}")
        if self.shapes.shape[1] < 2:
            raise DatasetError("landmark count must be at least 2")
        if not np.all(np.isfinite(self.shapes)):
            raise DatasetError("landmark coordinates must be finite")
        if self.bboxes.shape != (n, 4):
            raise DatasetError(f"bboxes must be (N, 4), got {self.bboxes.shape}")
        if np.any(self.bboxes[:, 2] <= self.bboxes[:, 0]) or np.any(
            self.bboxes[:, 3] <= self.bboxes[:, 1]
        ):
            raise DatasetError("bounding boxes must have positive sides")
        self.symmetry = check_symmetry(self.symmetry, self.n_landmarks)
        if self.ids is None:
            self.ids = [f"{i:06d}" for i in range(n)]
        if len(self.ids) != n or len(set(self.ids)) != n:
            raise DatasetError("sample ids must be unique, one per sample")

    def __len__(self):
        return len(self.images)

    @property
    def n_landmarks(self) -> int:
        return self.shapes.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            images=self.images[index],
            shapes=self.shapes[index],
            bboxes=self.bboxes[index],
            symmetry=self.symmetry,
            ids=[self.ids[i] for i in np.arange(len(self))[index]],
            latent_pose=None if self.latent_pose is None else self.latent_pose[index],
            roll=None if self.roll is None else self.roll[index],
            meta=dict(self.meta),
        )


# --------------------------------------------------------------------------
# annotation files


def load_annotation_file(path) -> np.ndarray:
    """Read a 300-W style ``.pts`` file into an ``(L, 2)`` array (0-indexed)."""
    with open(path) as fh:
        raw = fh.read().splitlines()
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip()]
    if len(lines) < 3:
        raise AnnotationParseError(path, len(raw), "file too short")
    (ln_v, version), (ln_n, count), (ln_b, brace) = lines[:3]
    if not version.startswith("version:"):
        raise AnnotationParseError(path, ln_v, f"expected 'version:' header, got {version!r}")
    if not count.startswith("n_points:"):
        raise AnnotationParseError(path, ln_n, f"expected 'n_points:' header, got {count!r}")
    try:
        n_points = int(count.split(":", 1)[1])
    except ValueError:
        raise AnnotationParseError(path, ln_n, f"bad point count {count!r}") from None
    if brace != "{":
        raise AnnotationParseError(path, ln_b, "expected '{'")
    points = []
    for lineno, text in lines[3:]:
        if text == "}":
            if len(points) != n_points:
                raise AnnotationParseError(
                    path, lineno, f"declared {n_points} points but found {len(points)}"
                )
            return as_points(np.array(points) - 1.0)
        if len(points) == n_points:
            raise AnnotationParseError(
                path, lineno, f"more than the declared {n_points} points"
            )
        parts = text.split()
        try:
            if len(parts) != 2:
                raise ValueError
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise AnnotationParseError(path, lineno, f"bad point line {text!r}") from None
    raise AnnotationParseError(path, len(raw), "missing closing '}'")


def write_annotation_file(path, shape):
    pts = as_points(shape) + 1.0
    with open(path, "w") as fh:
        fh.write("version: 1\n")
        fh.write(f"n_points: {len(pts)}\n")
        fh.write("{\n")
        for x, y in pts:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write("}\n")


def load_symmetry_file(path, n_landmarks) -> np.ndarray:
    """One ``i j`` pair (0-indexed) per line; unlisted landmarks map to themselves."""
    perm = np.arange(n_landmarks)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                i, j = (int(v) for v in line.split())
            except ValueError:
                raise AnnotationParseError(path, lineno, f"expected 'i j', got {line!r}") from None
            if not (0 <= i < n_landmarks and 0 <= j < n_landmarks):
                raise AnnotationParseError(path, lineno, "landmark index out of range")
            perm[i], perm[j] = j, i
    return check_symmetry(perm, n_landmarks)


def write_symmetry_file(path, symmetry):
    perm = check_symmetry(symmetry)
    with open(path, "w") as fh:
        for i, j in enumerate(perm):
            if i < j:
                fh.write(f"{i} {j}\n")


def load_image(path) -> np.ndarray:
    """PNG/PGM to ``(H, W, C)`` float array in ``[0, 1]``."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=float) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def save_image(path, image):
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


MANIFEST_FIELDS = ["id", "image_path", "annotation_path", "bx1", "by1", "bx2", "by2"]


def load_manifest(path, symmetry_path=None) -> Dataset:
    """Load a dataset from a CSV manifest.

    Relative paths are resolved against the manifest's directory.  All images
    must share one size.  Every row is loaded; nothing is skipped silently.
    """
    base = os.path.dirname(os.path.abspath(path))
    ids, images, shapes, boxes = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != MANIFEST_FIELDS:
            raise DatasetError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        for row in reader:
            ids.append(row["id"].strip())
            images.append(load_image(os.path.join(base, row["image_path"].strip())))
            shapes.append(load_annotation_file(os.path.join(base, row["annotation_path"].strip())))
            boxes.append([float(row[k]) for k in ("bx1", "by1", "bx2", "by2")])
    if not ids:
        raise DatasetError(f"{path}: manifest has no rows")
    if len({im.shape for im in images}) != 1:
        raise DatasetError(f"{path}: images differ in size")
    n_landmarks = shapes[0].shape[0]
    if symmetry_path:
        symmetry = load_symmetry_file(symmetry_path, n_landmarks)
    else:
        symmetry = np.arange(n_landmarks)
    logger.info("loaded %d samples from %s", len(ids), path)
    return Dataset(np.stack(images), np.stack(shapes), np.array(boxes), symmetry, ids=ids)


def save_dataset(dataset: Dataset, directory):
    """Write a dataset as PNG images + ``.pts`` files + manifest CSV."""
    os.makedirs(directory, exist_ok=True)
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for sid, image, shape, box in zip(dataset.ids, dataset.images, dataset.shapes, dataset.bboxes):
            save_image(os.path.join(directory, f"{sid}.png"), image)
            write_annotation_file(os.path.join(directory, f"{sid}.pts"), shape)
            writer.writerow([sid, f"{sid}.png", f"{sid}.pts", *(repr(float(b)) for b in box)])
    write_symmetry_file(os.path.join(directory, "symmetry.txt"), dataset.symmetry)
    return manifest


# --------------------------------------------------------------------------
# synthetic faces

# eyes, nose tip, mouth corners in face units (inter-ocular distance 1)
_TEMPLATE5 = np.array([[-0.5, -0.35], [0.5, -0.35], [0.0, 0.15], [-0.38, 0.55], [0.38, 0.55]])
_DEPTH5 = np.array([0.0, 0.0, 0.6, 0.15, 0.15])
_SYMMETRY5 = np.array([1, 0, 2, 4, 3])


def face_template(n_landmarks):
    """Mean face, per-landmark depth and symmetry map for ``n_landmarks`` points.

    Five landmarks give eyes, nose and mouth corners.  Other counts place
    mirrored pairs on a face oval plus centre-line points for odd counts.
    """
    if n_landmarks == 5:
        return _TEMPLATE5.copy(), _DEPTH5.copy(), _SYMMETRY5.copy()
    if n_landmarks < 2:
        raise ValueError("need at least 2 landmarks")
    n_pairs = n_landmarks // 2
    angles = np.linspace(-0.4 * np.pi, 0.4 * np.pi, n_pairs)
    left = np.stack([-(0.15 + 0.45 * np.cos(angles)), 0.6 * np.sin(angles)], axis=1)
    pts = np.empty((n_landmarks, 2))
    depth = np.empty(n_landmarks)
    sym = np.empty(n_landmarks, dtype=int)
    pts[0 : 2 * n_pairs : 2] = left
    pts[1 : 2 * n_pairs : 2] = left * np.array([-1.0, 1.0])
    depth[: 2 * n_pairs] = np.repeat(0.1 + 0.2 * (1 - np.cos(angles)), 2)
    for k in range(n_pairs):
        sym[2 * k], sym[2 * k + 1] = 2 * k + 1, 2 * k
    if n_landmarks % 2:
        pts[-1] = (0.0, 0.1)
        depth[-1] = 0.6
        sym[-1] = n_landmarks - 1
    return pts, depth, sym


@dataclass
class SyntheticConfig:
    """Settings for :func:`generate_synthetic`.

    Faces follow ``template + p * yaw_mode + q * mouth_mode + noise`` in face
    units, then a similarity map into the image.  ``p`` is the latent pose.

    ``pose_distribution`` is ``"uniform"`` on ``[-1, 1]`` or ``"skewed"``
    (``2 * Beta(skew_a, skew_b) - 1``, mass concentrated on one side).
    ``bbox_mode`` is ``"image"`` (box = whole image) or ``"detector"``
    (square around the face, with ``bbox_margin`` and ``bbox_jitter``).
    """

    n_samples: int = 2000
    n_landmarks: int = 5
    image_size: int = 32
    channels: int = 1
    pose_distribution: str = "uniform"
    skew_a: float = 2.0
    skew_b: float = 5.0
    expression_std: float = 0.3
    shape_noise: float = 0.02
    face_scale: float = 0.32
    scale_jitter: float = 0.1
    translation_jitter: float = 0.08
    roll_range: float = 0.0
    blob_sigma: float = 1.5
    blob_amplitude: float = 0.9
    pixel_noise: float = 0.03
    bbox_mode: str = "image"
    bbox_margin: float = 0.45
    bbox_jitter: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.n_landmarks < 2:
            raise ValueError("n_landmarks must be >= 2")
        if self.image_size < 4 * self.blob_sigma + 4:
            raise ValueError(
                f"image_size {self.image_size} too small for blobs of sigma {self.blob_sigma}"
            )
        if self.pose_distribution not in ("uniform", "skewed"):
            raise ValueError(f"unknown pose_distribution {self.pose_distribution!r}")
        if self.bbox_mode not in ("image", "detector"):
            raise ValueError(f"unknown bbox_mode {self.bbox_mode!r}")
        return self


def yaw_mode(n_landmarks):
    _, depth, _ = face_template(n_landmarks)
    mode = np.zeros((n_landmarks, 2))
    mode[:, 0] = depth
    return mode


def mouth_mode(n_landmarks):
    template, _, _ = face_template(n_landmarks)
    mode = np.zeros((n_landmarks, 2))
    mode[:, 1] = np.clip(template[:, 1], 0.0, None) * 0.55
    return mode


def render_blobs(points, size, sigma=1.5, amplitude=0.9, channels=1):
    """Anti-aliased Gaussian blobs (one per landmark) on a black image."""
    coords = np.arange(size, dtype=float)
    gx = np.exp(-((coords[None, :] - points[:, 0:1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((coords[None, :] - points[:, 1:2]) ** 2) / (2 * sigma**2))
    img = amplitude * np.einsum("ly,lx->yx", gy, gx)
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[..., None], channels, axis=2)


def sample_pose(cfg: SyntheticConfig, rng, n):
    if cfg.pose_distribution == "uniform":
        return rng.uniform(-1.0, 1.0, n)
    return 2.0 * rng.beta(cfg.skew_a, cfg.skew_b, n) - 1.0


def generate_synthetic(cfg: SyntheticConfig, pose=None) -> Dataset:
    """Draw a synthetic landmark dataset.

    ``pose`` optionally fixes the latent pose of every sample (length
    ``n_samples``), bypassing the configured distribution.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, n_lm, size = cfg.n_samples, cfg.n_landmarks, cfg.image_size
    template, _, symmetry = face_template(n_lm)
    yaw, mouth = yaw_mode(n_lm), mouth_mode(n_lm)

    p = sample_pose(cfg, rng, n) if pose is None else np.asarray(pose, dtype=float)
    if p.shape != (n,):
        raise ValueError("pose override must have one value per sample")
    q = rng.normal(0.0, cfg.expression_std, n)
    noise = rng.normal(0.0, cfg.shape_noise, (n, n_lm, 2))
    scale = size * cfg.face_scale * (1 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter, n))
    centre = (size - 1) / 2 + size * rng.uniform(-cfg.translation_jitter, cfg.translation_jitter, (n, 2))
    roll = np.deg2rad(rng.uniform(-cfg.roll_range, cfg.roll_range, n))
    box_jit = rng.uniform(-cfg.bbox_jitter, cfg.bbox_jitter, (n, 4))

    images = np.empty((n, size, size, cfg.channels))
    shapes = np.empty((n, n_lm, 2))
    bboxes = np.empty((n, 4))
    face_extent = np.ptp(template, axis=0).max()
    for i in range(n):
        local = template + p[i] * yaw + q[i] * mouth + noise[i]
        pts = scale[i] * local @ rotation_matrix(roll[i]).T + centre[i]
        shapes[i] = pts
        img = render_blobs(pts, size, cfg.blob_sigma, cfg.blob_amplitude, cfg.channels)
        if cfg.pixel_noise > 0:
            img = np.clip(img + rng.normal(0.0, cfg.pixel_noise, img.shape), 0.0, 1.0)
        images[i] = img
        if cfg.bbox_mode == "image":
            bboxes[i] = full_image_bbox(size, size)
        else:
            side = scale[i] * face_extent * (1 + 2 * cfg.bbox_margin)
            c = centre[i] + scale[i] * rotation_matrix(roll[i]) @ np.array([0.0, 0.1])
            half = side / 2
            bboxes[i] = np.array([c[0] - half, c[1] - half, c[0] + half, c[1] + half]) + side * box_jit[i]
    return Dataset(
        images,
        shapes,
        bboxes,
        symmetry,
        latent_pose=p,
        roll=roll,
        meta={"generator": "synthetic", "seed": cfg.seed},
    )
