"""scikit-learn style wrapper around :class:`Network` + :func:`train`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..losses import make_loss
from .layers import format_layers, parse_layers
from .network import Network, desk_layers
from .train import TrainConfig, train


def check_images(X) -> np.ndarray:
    """Validate a batch of ``(N, H, W, C)`` images with values in [0, 1]."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images as (N, H, W, C), got array of shape {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return X


class LandmarkRegressor(RegressorMixin, BaseEstimator):
    """Convolutional landmark regressor trained with a robust loss.

    Targets are shape vectors ``[x_1..x_L, y_1..y_L]`` in crop-normalised
    coordinates (``[0, 1]`` across the input image).

    Parameters
    ----------
    layers : str or None
        Layer string such as ``"conv16,relu,pool,fc64,relu"``; the output layer
        is appended automatically.  ``None`` picks a small three-stage net.
    loss : {"l2", "l1", "smooth_l1", "wing"}
    w, epsilon : float
        Wing loss parameters, in units of ``coord_scale``.
    coord_scale : float or "pixels"
        Factor applied to residuals before the loss.  ``"pixels"`` uses the
        input width, so ``w`` and ``epsilon`` are in input pixels.
    lr, lr_final, momentum, weight_decay, batch_size, n_iter :
        SGD settings; the learning rate decays log-linearly.
    init_output : {"mean", "zero"}
        ``"mean"`` starts the output bias at the mean training target.
    random_state : int
    """

    def __init__(self, layers=None, loss="wing", w=10.0, epsilon=2.0, coord_scale="pixels",
                 lr=1e-3, lr_final=1e-5, momentum=0.9, weight_decay=5e-4, batch_size=8,
                 n_iter=2000, init_output="mean", random_state=0):
        self.layers = layers
        self.loss = loss
        self.w = w
        self.epsilon = epsilon
        self.coord_scale = coord_scale
        self.lr = lr
        self.lr_final = lr_final
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.n_iter = n_iter
        self.init_output = init_output
        self.random_state = random_state

    def _layer_specs(self, n_out):
        if self.layers is None:
            return desk_layers(n_out // 2)
        specs = parse_layers(self.layers)
        if specs and specs[-1].kind == "output":
            return specs
        return parse_layers(format_layers(specs) + f",output{n_out}")

    def _scale(self, input_shape):
        if self.coord_scale == "pixels":
            return float(input_shape[1])
        return float(self.coord_scale)

    def train_config(self, input_shape=None) -> TrainConfig:
        scale = self._scale(input_shape) if input_shape is not None else 1.0
        return TrainConfig(
            loss=make_loss(self.loss, self.w, self.epsilon),
            lr=self.lr, lr_final=self.lr_final, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            iterations=self.n_iter, coord_scale=scale, seed=self.random_state,
        ).validate()

    def fit(self, X, y):
        X = check_images(X)
        y = check_array(y, dtype=np.float64)
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        if y.shape[1] % 2:
            raise ValueError("targets must be 2L-dimensional shape vectors")
        cfg = self.train_config(X.shape[1:])
        net = Network(self._layer_specs(y.shape[1]), X.shape[1:], seed=self.random_state)
        if self.init_output == "mean":
            net.params[-1]["b"][:] = y.mean(axis=0)
        result = train(net, X, y, cfg)
        self.network_ = result.net
        self.loss_curve_ = result.curve
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_network(cls, net: Network, **params) -> "LandmarkRegressor":
        est = cls(**params)
        est.network_ = net
        est.loss_curve_ = []
        est.n_features_in_ = int(np.prod(net.input_shape))
        return est

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict(check_images(X))

    def score(self, X, y, sample_weight=None):
        """Negative mean point error in crop-normalised units (higher is better)."""
        pred = self.predict(X)
        y = check_array(y, dtype=np.float64)
        n = y.shape[1] // 2
        err = np.hypot(pred[:, :n] - y[:, :n], pred[:, n:] - y[:, n:]).mean(axis=1)
        return -float(np.average(err, weights=sample_weight))
