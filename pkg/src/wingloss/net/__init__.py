from .estimator import LandmarkRegressor, check_images
from .layers import LayerSpec, format_layers, parse_layers
from .network import (
    BackwardStateError,
    CheckpointError,
    GeometryError,
    Network,
    backward,
    cnn6_layers,
    cnn7_layers,
    desk_layers,
    forward,
    layer_shapes,
)
from .train import TrainConfig, TrainingDivergedError, TrainResult, learning_rate, train

__all__ = [
    "BackwardStateError", "CheckpointError", "GeometryError", "LandmarkRegressor", "LayerSpec",
    "Network", "TrainConfig", "TrainResult", "TrainingDivergedError", "backward", "check_images",
    "cnn6_layers", "cnn7_layers", "desk_layers", "format_layers", "forward", "layer_shapes",
    "learning_rate", "parse_layers", "train",
]
