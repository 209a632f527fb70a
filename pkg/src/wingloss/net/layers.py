"""Layer kinds with explicit forward/backward passes.

Activations are NHWC float64 arrays.  Each layer's ``forward`` returns the
output plus a cache consumed by ``backward``, which returns the input
gradient and a dict of parameter gradients.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class LayerSpec:
    """``kind`` is one of conv, pool, relu, fc, output.  ``size`` is the
    number of conv kernels or fc/output units (0 for pool/relu)."""

    kind: str
    size: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "fc", "output") and self.size < 1:
            raise ValueError(f"{self.kind} layer needs a positive size")

    def __str__(self):
        return f"{self.kind}{self.size}" if self.size else self.kind


_TOKEN = re.compile(r"^(conv|pool|relu|fc|output)(\d*)$")


def parse_layers(text) -> list:
    """Parse ``"conv16,relu,pool,fc64,relu,output10"`` into LayerSpecs."""
    if isinstance(text, (list, tuple)):
        return [s if isinstance(s, LayerSpec) else parse_layers(s)[0] for s in text]
    specs = []
    for token in str(text).replace(" ", "").split(","):
        if not token:
            continue
        m = _TOKEN.match(token.lower())
        if not m:
            raise ValueError(f"bad layer token {token!r}")
        specs.append(LayerSpec(m.group(1), int(m.group(2) or 0)))
    return specs


def format_layers(specs) -> str:
    return ",".join(str(s) for s in specs)


class Conv3x3:
    """3x3 convolution, stride 1, zero 'same' padding."""

    def __init__(self, out_channels):
        self.out_channels = out_channels

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        return (h, w, self.out_channels)

    def init_params(self, in_shape, rng):
        c = in_shape[2]
        fan_in = 9 * c
        bound = math.sqrt(6.0 / fan_in)
        return {
            "W": rng.uniform(-bound, bound, (fan_in, self.out_channels)),
            "b": np.zeros(self.out_channels),
        }

    def forward(self, x, params):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # rows of W are ordered (ky, kx, channel)
        windows = sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
        cols = windows.reshape(n * h * w, 9 * c)
        out = cols @ params["W"] + params["b"]
        return out.reshape(n, h, w, -1), (x.shape, cols)

    def backward(self, dout, cache, params, need_dx=True):
        (n, h, w, c), cols = cache
        d2 = dout.reshape(n * h * w, -1)
        grads = {"W": cols.T @ d2, "b": d2.sum(axis=0)}
        if not need_dx:
            return None, grads
        dcols = (d2 @ params["W"].T).reshape(n, h, w, 3, 3, c)
        dxp = np.zeros((n, h + 2, w + 2, c))
        for i in range(3):
            for j in range(3):
                dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:-1, 1:-1, :], grads


class MaxPool2:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (h // 2, w // 2, c)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, x, params):
        n, h, w, c = x.shape
        h2, w2 = h // 2, w // 2
        blocks = x[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
        idx = blocks.argmax(axis=-1)[..., None]
        out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache, params, need_dx=True):
        (n, h, w, c), idx = cache
        h2, w2 = h // 2, w // 2
        d = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(d, idx, dout[..., None], axis=-1)
        d = d.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        dx = np.zeros((n, h, w, c))
        dx[:, : 2 * h2, : 2 * w2, :] = d
        return dx, {}


class ReLU:
    def output_shape(self, in_shape):
        return in_shape

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, x, params):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, cache, params, need_dx=True):
        return dout * cache, {}


class FullyConnected:
    """Affine layer on the flattened input."""

    def __init__(self, out_dim, gain=6.0):
        self.out_dim = out_dim
        self.gain = gain

    def output_shape(self, in_shape):
        return (self.out_dim,)

    def init_params(self, in_shape, rng):
        fan_in = int(np.prod(in_shape))
        bound = math.sqrt(self.gain / fan_in)
        return {
            "W": rng.uniform(-bound, bound, (fan_in, self.out_dim)),
            "b": np.zeros(self.out_dim),
        }

    def forward(self, x, params):
        flat = x.reshape(len(x), -1)
        return flat @ params["W"] + params["b"], (x.shape, flat)

    def backward(self, dout, cache, params, need_dx=True):
        shape, flat = cache
        grads = {"W": flat.T @ dout, "b": dout.sum(axis=0)}
        if not need_dx:
            return None, grads
        return (dout @ params["W"].T).reshape(shape), grads


LAYER_KINDS = ("conv", "pool", "relu", "fc", "output")


def build_layer(spec: LayerSpec):
    if spec.kind == "conv":
        return Conv3x3(spec.size)
    if spec.kind == "pool":
        return MaxPool2()
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "fc":
        return FullyConnected(spec.size)
    # linear output layer: smaller init gain, no ReLU follows
    return FullyConnected(spec.size, gain=3.0)
