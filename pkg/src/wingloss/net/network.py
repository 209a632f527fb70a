"""A layered coordinate regressor with manual backpropagation."""
from __future__ import annotations

import json
import struct

import numpy as np

from .layers import LayerSpec, build_layer, format_layers, parse_layers

CHECKPOINT_MAGIC = b"WINGNET\x00"
CHECKPOINT_VERSION = 1


class GeometryError(ValueError):
    """Layer stack or input does not fit the network geometry."""


class BackwardStateError(RuntimeError):
    """``backward`` called without a matching ``forward``."""


class CheckpointError(ValueError):
    pass


def cnn6_layers(n_landmarks):
    """Five conv/ReLU/pool stages on 64x64x3, one FC layer, 2L outputs."""
    specs = []
    for ch in (32, 64, 128, 256, 512):
        specs += [LayerSpec("conv", ch), LayerSpec("relu"), LayerSpec("pool")]
    return specs + [LayerSpec("fc", 1024), LayerSpec("relu"), LayerSpec("output", 2 * n_landmarks)]


def cnn7_layers(n_landmarks):
    """Six conv stages on 128x128x3 down to 2x2x512, first conv with 64 kernels."""
    specs = []
    for ch in (64, 64, 128, 256, 512, 512):
        specs += [LayerSpec("conv", ch), LayerSpec("relu"), LayerSpec("pool")]
    return specs + [LayerSpec("fc", 1024), LayerSpec("relu"), LayerSpec("output", 2 * n_landmarks)]


def desk_layers(n_landmarks, widths=(16, 32, 64), fc=128):
    specs = []
    for ch in widths:
        specs += [LayerSpec("conv", ch), LayerSpec("relu"), LayerSpec("pool")]
    return specs + [LayerSpec("fc", fc), LayerSpec("relu"), LayerSpec("output", 2 * n_landmarks)]


def layer_shapes(specs, input_shape):
    """Activation shape after every layer; raises GeometryError if invalid."""
    specs = parse_layers(specs)
    if not specs or specs[-1].kind != "output":
        raise GeometryError("the last layer must be an output layer")
    if any(s.kind == "output" for s in specs[:-1]):
        raise GeometryError("only the last layer may be an output layer")
    shape = tuple(int(v) for v in input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise GeometryError(f"input geometry must be (H, W, C) positive, got {input_shape}")
    shapes = []
    for spec in specs:
        if len(shape) == 1 and spec.kind in ("conv", "pool"):
            raise GeometryError(f"{spec} layer after a fully connected layer")
        shape = build_layer(spec).output_shape(shape)
        if min(shape) < 1:
            raise GeometryError(f"spatial size collapses to {shape} at layer {spec}")
        shapes.append(shape)
    return shapes


class Network:
    """Stack of layers mapping ``(N, H, W, C)`` images to ``(N, 2L)`` vectors.

    Parameters are plain numpy arrays in ``self.params`` (one dict per
    layer).  ``forward`` keeps the per-layer caches needed by ``backward``.
    """

    def __init__(self, specs, input_shape, seed=0, params=None):
        self.specs = parse_layers(specs)
        self.input_shape = tuple(int(v) for v in input_shape)
        self._shapes = layer_shapes(self.specs, self.input_shape)
        self.layers = [build_layer(s) for s in self.specs]
        if params is None:
            rng = np.random.default_rng(seed)
            params, shape = [], self.input_shape
            for layer, out_shape in zip(self.layers, self._shapes):
                params.append(layer.init_params(shape, rng))
                shape = out_shape
        self.params = params
        self._check_params()
        self._caches = None

    def _check_params(self):
        if len(self.params) != len(self.layers):
            raise GeometryError("one parameter dict per layer expected")
        shape = self.input_shape
        rng = np.random.default_rng(0)
        for layer, p, out_shape in zip(self.layers, self.params, self._shapes):
            ref = layer.init_params(shape, rng)
            if set(ref) != set(p) or any(np.shape(p[k]) != ref[k].shape for k in ref):
                raise GeometryError(f"parameter shapes do not match layer {type(layer).__name__}")
            if not all(np.all(np.isfinite(v)) for v in p.values()):
                raise GeometryError(f"non-finite parameters in layer {type(layer).__name__}")
            shape = out_shape

    @property
    def output_dim(self) -> int:
        return self._shapes[-1][0]

    @property
    def n_params(self) -> int:
        return sum(v.size for p in self.params for v in p.values())

    def forward(self, X, keep_cache=True):
        X = np.asarray(X, dtype=float)
        if X.ndim == 3:
            X = X[None]
        if X.shape[1:] != self.input_shape:
            raise GeometryError(
                f"input of shape {X.shape[1:]} does not match network geometry {self.input_shape}"
            )
        caches = []
        out = X
        for layer, p in zip(self.layers, self.params):
            out, cache = layer.forward(out, p)
            caches.append(cache)
        self._caches = (X.shape[0], caches) if keep_cache else None
        return out

    def predict(self, X, batch_size=256):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 3
        if single:
            X = X[None]
        outs = [self.forward(X[i : i + batch_size], keep_cache=False)
                for i in range(0, len(X), batch_size)]
        out = np.concatenate(outs)
        return out[0] if single else out

    def backward(self, grad_output):
        """Parameter gradients for the last ``forward`` call.

        ``grad_output`` is dLoss/dOutput with shape ``(N, 2L)``.  Returns a
        list of per-layer gradient dicts matching ``self.params``.
        """
        if self._caches is None:
            raise BackwardStateError("backward requires a preceding forward pass")
        n, caches = self._caches
        grad = np.asarray(grad_output, dtype=float)
        if grad.ndim == 1:
            grad = grad[None]
        if grad.shape != (n, self.output_dim):
            raise BackwardStateError(
                f"grad_output shape {grad.shape} does not match last forward ({n}, {self.output_dim})"
            )
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            grad, grads[k] = self.layers[k].backward(grad, caches[k], self.params[k], need_dx=k > 0)
        return grads

    def copy(self) -> "Network":
        params = [{k: v.copy() for k, v in p.items()} for p in self.params]
        return Network(self.specs, self.input_shape, params=params)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p[k].ravel() for p in self.params for k in sorted(p)])

    # checkpoint layout:
    #   8 bytes magic | uint32 LE version | uint32 LE header length
    #   header: UTF-8 JSON {"layers", "input_shape", "params": [[layer, name, shape], ...]}
    #   payload: each parameter array as little-endian float64, C order, header order
    def to_bytes(self) -> bytes:
        entries = [[i, k, list(p[k].shape)] for i, p in enumerate(self.params) for k in sorted(p)]
        header = json.dumps(
            {"layers": format_layers(self.specs), "input_shape": list(self.input_shape),
             "params": entries},
            sort_keys=True,
        ).encode()
        blobs = [np.ascontiguousarray(self.params[i][k], dtype="<f8").tobytes()
                 for i, k, _ in entries]
        return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Network":
        if data[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a network checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16 : 16 + hlen])
        specs = parse_layers(header["layers"])
        params = [{} for _ in specs]
        offset = 16 + hlen
        for i, k, shape in header["params"]:
            size = int(np.prod(shape)) * 8
            if offset + size > len(data):
                raise CheckpointError("checkpoint truncated")
            params[i][k] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).reshape(shape).copy()
            offset += size
        if offset != len(data):
            raise CheckpointError("trailing bytes after checkpoint payload")
        return cls(specs, header["input_shape"], params=params)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Network":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def forward(net: Network, image):
    """Prediction vector for one ``(H, W, C)`` image (or a batch)."""
    out = net.forward(image)
    return out[0] if np.ndim(image) == 3 else out


def backward(net: Network, image, grad_output):
    net.forward(image)
    return net.backward(grad_output)
