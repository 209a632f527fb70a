"""Two-stage coarse-to-fine landmark localisation.

Stage 1 predicts landmarks from the detector box.  Its prediction is
Procrustes-aligned to the mean shape to estimate the in-plane head rotation;
stage 2 then sees an upright square crop around the de-rotated prediction,
at its own input resolution.  Both stages map back to original image
coordinates through their exact crop transforms.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, clone

from .data import Dataset
from .geometry import Crop
from .net import LandmarkRegressor, Network
from .shapes import AlignmentError, as_points, from_vector, mean_shape, procrustes_align, rotation_matrix, to_vector

logger = logging.getLogger(__name__)


class PipelineInputError(ValueError):
    pass


@dataclass(frozen=True)
class StageCorrection:
    """Upright square crop for stage 2.

    ``rotation`` is the estimated in-plane head rotation (radians); the crop
    is the square ``bbox`` rotated by ``rotation`` about its centre.
    """

    rotation: float
    centre: tuple
    side: float
    fallback: bool = False

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("corrected box must have a positive side")

    @property
    def bbox(self) -> np.ndarray:
        cx, cy = self.centre
        h = self.side / 2
        return np.array([cx - h, cy - h, cx + h, cy + h])

    def crop(self) -> Crop:
        return Crop.rotated_square(self.centre, self.side, self.rotation)


def estimate_correction(stage1_pred, mean, margin=0.2, fallback_bbox=None) -> StageCorrection:
    """Rotation and square box for the second stage.

    The rotation is the angle taking the upright ``mean`` onto
    ``stage1_pred``.  The box is the tight square around the prediction after
    removing that rotation, enlarged by ``margin``.  If the prediction is
    degenerate, the identity correction (``fallback_bbox`` as given, no
    rotation) is returned with ``fallback=True``.
    """
    pred = as_points(stage1_pred)
    mean = as_points(mean)
    try:
        _, transform = procrustes_align(pred, mean)
    except AlignmentError:
        logger.warning("degenerate stage-1 prediction; using identity correction")
        if fallback_bbox is None:
            centre, side = pred.mean(axis=0), 1.0
        else:
            x1, y1, x2, y2 = fallback_bbox
            centre, side = ((x1 + x2) / 2, (y1 + y2) / 2), max(x2 - x1, y2 - y1)
        return StageCorrection(0.0, tuple(map(float, centre)), float(side), fallback=True)
    rotation = -transform.rotation
    c = pred.mean(axis=0)
    local = (pred - c) @ rotation_matrix(-rotation).T
    lo, hi = local.min(axis=0), local.max(axis=0)
    side = float(np.max(hi - lo)) * (1.0 + margin)
    if not side > 0:
        side = 1.0
    centre = c + rotation_matrix(rotation) @ ((lo + hi) / 2)
    return StageCorrection(float(rotation), tuple(map(float, centre)), side)


def clamp_bbox(bbox, image_shape):
    """Clip a box to the image extent; raise if it lies entirely outside."""
    h, w = image_shape[:2]
    x1, y1, x2, y2 = (float(v) for v in bbox)
    lo_x, lo_y, hi_x, hi_y = -0.5, -0.5, w - 0.5, h - 0.5
    if x2 <= lo_x or y2 <= lo_y or x1 >= hi_x or y1 >= hi_y:
        raise PipelineInputError(f"bounding box {bbox} lies outside the {w}x{h} image")
    return np.array([max(x1, lo_x), max(y1, lo_y), min(x2, hi_x), min(y2, hi_y)])


def _predict_in_crop(net: Network, image, crop: Crop, size) -> np.ndarray:
    x = crop.sample(image, size)
    return crop.to_image(from_vector(net.predict(x)))


@dataclass
class TwoStageResult:
    landmarks: np.ndarray
    stage1: np.ndarray
    correction: StageCorrection


def run_two_stage(net1: Network, net2: Network, image, bbox, mean, margin=0.2) -> TwoStageResult:
    """Localise landmarks in ``image`` given the detector ``bbox``.

    Input sizes are taken from each network's geometry.  All coordinates in
    the result are original image pixels.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        image = image[..., None]
    box = clamp_bbox(bbox, image.shape)
    crop1 = Crop.from_bbox(box)
    stage1 = _predict_in_crop(net1, image, crop1, net1.input_shape[0])
    corr = estimate_correction(stage1, mean, margin, fallback_bbox=box)
    final = _predict_in_crop(net2, image, corr.crop(), net2.input_shape[0])
    return TwoStageResult(final, stage1, corr)


def perturb_correction(corr: StageCorrection, rng, max_rotation_deg=10.0, max_shift=0.05,
                       max_scale=0.05) -> StageCorrection:
    """Random rotation / shift / scale around a correction (stage-2 training)."""
    rot = corr.rotation + math.radians(rng.uniform(-max_rotation_deg, max_rotation_deg))
    shift = rng.uniform(-max_shift, max_shift, 2) * corr.side
    side = corr.side * (1 + rng.uniform(-max_scale, max_scale))
    return StageCorrection(rot, tuple(np.asarray(corr.centre) + shift), side)


class TwoStageLocalizer(BaseEstimator):
    """Coarse-to-fine localiser built from two :class:`LandmarkRegressor` s.

    Parameters
    ----------
    stage1, stage2 : LandmarkRegressor
        Unfitted templates; clones are fitted.
    input_size1, input_size2 : int
        Square crop sizes fed to each stage.
    margin : float
        Relative enlargement of the stage-2 box.
    stage2_rotation : float
        Max random rotation (deg) applied to stage-2 training crops.
    stage2_shift, stage2_scale : float
        Max relative box shift / scale perturbation for stage-2 training.
    random_state : int
    """

    def __init__(self, stage1=None, stage2=None, input_size1=32, input_size2=32, margin=0.2,
                 stage2_rotation=10.0, stage2_shift=0.05, stage2_scale=0.05, random_state=0):
        self.stage1 = stage1
        self.stage2 = stage2
        self.input_size1 = input_size1
        self.input_size2 = input_size2
        self.margin = margin
        self.stage2_rotation = stage2_rotation
        self.stage2_shift = stage2_shift
        self.stage2_scale = stage2_scale
        self.random_state = random_state

    def stage1_training_data(self, dataset: Dataset):
        n = len(dataset)
        X = np.empty((n, self.input_size1, self.input_size1, dataset.images.shape[-1]))
        Y = np.empty((n, 2 * dataset.n_landmarks))
        for i in range(n):
            crop = Crop.from_bbox(clamp_bbox(dataset.bboxes[i], dataset.images[i].shape))
            X[i] = crop.sample(dataset.images[i], self.input_size1)
            Y[i] = to_vector(crop.to_crop(dataset.shapes[i]))
        return X, Y

    def stage2_training_data(self, dataset: Dataset, mean):
        rng = np.random.default_rng(self.random_state)
        n = len(dataset)
        X = np.empty((n, self.input_size2, self.input_size2, dataset.images.shape[-1]))
        Y = np.empty((n, 2 * dataset.n_landmarks))
        for i in range(n):
            corr = estimate_correction(dataset.shapes[i], mean, self.margin, dataset.bboxes[i])
            corr = perturb_correction(corr, rng, self.stage2_rotation, self.stage2_shift,
                                      self.stage2_scale)
            crop = corr.crop()
            X[i] = crop.sample(dataset.images[i], self.input_size2)
            Y[i] = to_vector(crop.to_crop(dataset.shapes[i]))
        return X, Y

    def fit(self, dataset: Dataset, stage1_data=None):
        """Fit both stages on ``dataset``.

        ``stage1_data`` optionally supplies ``(X, Y)`` for stage 1, e.g. a
        pose-balanced set; by default the detector crops of ``dataset``.
        """
        self.mean_ = mean_shape(dataset.shapes)
        X1, Y1 = stage1_data if stage1_data is not None else self.stage1_training_data(dataset)
        self.stage1_ = clone(self.stage1 or LandmarkRegressor()).fit(X1, Y1)
        X2, Y2 = self.stage2_training_data(dataset, self.mean_)
        self.stage2_ = clone(self.stage2 or LandmarkRegressor()).fit(X2, Y2)
        return self

    def predict_detailed(self, images, bboxes):
        return [
            run_two_stage(self.stage1_.network_, self.stage2_.network_, img, box, self.mean_,
                          self.margin)
            for img, box in zip(images, bboxes)
        ]

    def predict(self, images, bboxes) -> np.ndarray:
        """Landmarks ``(N, L, 2)`` in original image coordinates."""
        return np.array([r.landmarks for r in self.predict_detailed(images, bboxes)])

    def predict_stage1(self, images, bboxes) -> np.ndarray:
        out = []
        for img, box in zip(images, bboxes):
            img = np.asarray(img, dtype=float)
            crop = Crop.from_bbox(clamp_bbox(box, img.shape))
            out.append(_predict_in_crop(self.stage1_.network_, img, crop, self.input_size1))
        return np.array(out)
