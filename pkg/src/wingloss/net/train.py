"""Mini-batch SGD with momentum, weight decay and log-linear LR decay."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..losses import Loss, WingLoss, batch_loss
from .network import Network

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration, lr, value):
        super().__init__(
            f"training diverged at iteration {iteration} (learning rate {lr:.3g}, loss {value})"
        )
        self.iteration = iteration
        self.lr = lr


@dataclass
class TrainConfig:
    """SGD settings.

    ``coord_scale`` multiplies crop-normalised residuals before the loss is
    applied, so ``coord_scale = input width`` puts (w, epsilon) in pixels.
    The learning rate decays log-linearly from ``lr`` to ``lr_final``.
    """

    loss: Loss = field(default_factory=WingLoss)
    lr: float = 1e-3
    lr_final: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 8
    iterations: int = 2000
    coord_scale: float = 1.0
    log_every: int = 100
    seed: int = 0

    def validate(self):
        if self.lr < 0 or self.lr_final < 0:
            raise ValueError("learning rates must be non-negative")
        if (self.lr == 0) != (self.lr_final == 0):
            raise ValueError("lr and lr_final must both be zero or both positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.iterations < 1 or self.log_every < 1:
            raise ValueError("batch_size, iterations and log_every must be positive")
        if not self.coord_scale > 0:
            raise ValueError("coord_scale must be positive")
        return self


def learning_rate(cfg: TrainConfig, it: int) -> float:
    """Log-linear interpolation between ``cfg.lr`` and ``cfg.lr_final``."""
    if cfg.lr == 0:
        return 0.0
    if cfg.iterations == 1:
        return cfg.lr
    frac = it / (cfg.iterations - 1)
    return cfg.lr * math.exp(frac * math.log(cfg.lr_final / cfg.lr))


def loss_and_grad(net: Network, X, Y, loss: Loss, coord_scale=1.0):
    """Mean per-sample loss over the batch and its parameter gradients.

    Returns ``(nan, None)`` if the prediction is not finite.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        pred = net.forward(X)
    if not np.all(np.isfinite(pred)):
        return float("nan"), None
    with np.errstate(over="ignore", invalid="ignore"):
        value, dpred = batch_loss(loss, coord_scale * pred, coord_scale * Y)
        grads = net.backward(coord_scale * dpred)
    return value, grads


def sgd_step(net: Network, grads, velocity, lr, momentum, weight_decay):
    """``v <- momentum v - lr (g + wd theta)``; ``theta <- theta + v``."""
    for p, g, v in zip(net.params, grads, velocity):
        for k in p:
            v[k] *= momentum
            v[k] -= lr * (g[k] + weight_decay * p[k])
            p[k] += v[k]


@dataclass
class TrainResult:
    net: Network
    curve: list
    iterations: int


def train(net: Network, X, Y, cfg: TrainConfig) -> TrainResult:
    """Fit ``net`` to images ``X`` (N, H, W, C) and targets ``Y`` (N, 2L).

    Batches are drawn by reshuffling each epoch with ``cfg.seed``.  The loss
    curve holds ``(iteration, mean batch loss since last record)`` every
    ``cfg.log_every`` iterations.  ``net`` is updated in place.
    """
    cfg.validate()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) == 0 or len(X) != len(Y):
        raise ValueError("training needs matching, non-empty X and Y")
    rng = np.random.default_rng(cfg.seed)
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
    curve = []
    order = rng.permutation(len(X))
    pos = 0
    window = []
    bs = min(cfg.batch_size, len(X))
    for it in range(cfg.iterations):
        if pos + bs > len(X):
            order = rng.permutation(len(X))
            pos = 0
        idx = order[pos : pos + bs]
        pos += bs
        lr = learning_rate(cfg, it)
        value, grads = loss_and_grad(net, X[idx], Y[idx], cfg.loss, cfg.coord_scale)
        if not math.isfinite(value):
            raise TrainingDivergedError(it, lr, value)
        sgd_step(net, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
        window.append(value)
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
            if not all(np.all(np.isfinite(v)) for p in net.params for v in p.values()):
                raise TrainingDivergedError(it, lr, "non-finite parameters")
            curve.append((it + 1, float(np.mean(window))))
            logger.debug("iter %d lr %.3g loss %.5g", it + 1, lr, curve[-1][1])
            window = []
    return TrainResult(net, curve, cfg.iterations)
