"""Robust landmark regression with the Wing loss, pose-based data balancing
and a two-stage coarse-to-fine localiser, on a small numpy CNN."""

from .losses import L1Loss, L2Loss, LossDomainError, SmoothL1Loss, WingLoss, WingParams, make_loss
from .shapes import ShapeModel, mean_shape, procrustes_align
from .net import LandmarkRegressor, Network
from .pipeline import TwoStageLocalizer, estimate_correction, run_two_stage
from .eval import NormalisationRule, ced_curve, nme
from .data import Dataset, SyntheticConfig, generate_synthetic, load_manifest

__version__ = "0.1.0"

__all__ = [
    "Dataset", "L1Loss", "L2Loss", "LandmarkRegressor", "LossDomainError", "Network", "NormalisationRule",
    "ShapeModel", "SmoothL1Loss", "SyntheticConfig", "TwoStageLocalizer", "WingLoss", "WingParams", "ced_curve",
    "estimate_correction", "generate_synthetic", "load_manifest", "make_loss", "mean_shape", "nme", "procrustes_align", "run_two_stage",
]
