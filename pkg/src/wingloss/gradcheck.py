"""Finite-difference checks for loss and network gradients.

Relative error per entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
Points closer than ``margin`` to a kink (loss breakpoints, ReLU zero,
max-pool ties) are resampled: a perturbed point is rejected if the ReLU
masks or pooling winners change between ``theta +/- h``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import L1Loss, L2Loss, SmoothL1Loss, WingLoss, batch_loss
from .net.layers import Conv3x3, FullyConnected, MaxPool2, ReLU
from .net.network import Network

LOSS_TOL = 1e-5
NET_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tolerance:.0e}, {self.n_checked} points)")


def rel_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def loss_kinks(loss):
    if isinstance(loss, WingLoss):
        return (0.0, loss.w)
    if isinstance(loss, SmoothL1Loss):
        return (0.0, 1.0)
    if isinstance(loss, L1Loss):
        return (0.0,)
    return ()


def sample_residuals(loss, rng, n, low=-20.0, high=20.0, margin=1e-3):
    """Uniform residuals with ``|x|`` kept ``margin`` away from every kink."""
    kinks = loss_kinks(loss)
    out = []
    while len(out) < n:
        x = rng.uniform(low, high)
        if all(abs(abs(x) - k) > margin for k in kinks):
            out.append(x)
    return np.array(out)


def check_loss(loss, rng, n=200, h=1e-6, tol=LOSS_TOL, corrupt=False) -> CheckResult:
    x = sample_residuals(loss, rng, n)
    numeric = (loss.value(x + h) - loss.value(x - h)) / (2 * h)
    analytic = loss.grad(x) * (1.5 if corrupt else 1.0)
    return CheckResult(loss_label(loss), float(rel_error(analytic, numeric).max()), tol, n)


def loss_label(loss):
    if isinstance(loss, WingLoss):
        return f"loss:wing(w={loss.w:g},eps={loss.epsilon:g})"
    return f"loss:{loss.name}"


def _pattern(caches):
    """Discrete state of a forward pass: ReLU masks and pooling winners."""
    parts = []
    for cache in caches:
        if isinstance(cache, np.ndarray) and cache.dtype == bool:
            parts.append(cache.ravel())
        elif isinstance(cache, tuple) and len(cache) == 2 and isinstance(cache[1], np.ndarray) \
                and cache[1].dtype.kind == "i":
            parts.append(cache[1].ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _layer_forward(layer, x, params):
    out, cache = layer.forward(x, params)
    return out, [cache]


def check_layer(layer, in_shape, rng, n_points=40, h=1e-6, tol=NET_TOL, corrupt=False,
                name=None) -> CheckResult:
    """Check input and parameter gradients of one layer on the objective sum(R * out)."""
    params = layer.init_params(in_shape, rng)
    for v in params.values():
        v += rng.normal(0, 0.1, v.shape)
    x = rng.normal(0, 1, (2, *in_shape))
    out, caches = _layer_forward(layer, x, params)
    R = rng.normal(0, 1, out.shape)
    dx, grads = layer.backward(R, caches[0], params)
    base = _pattern(caches)

    def objective():
        o, c = _layer_forward(layer, x, params)
        return float(np.sum(R * o)), _pattern(c)

    targets = [("x", x, dx)] + [(k, params[k], grads[k]) for k in sorted(params)]
    errs, checked = [], 0
    for label, arr, g in targets:
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        picks = rng.permutation(flat.size)
        count = 0
        for idx in picks:
            if count >= n_points:
                break
            orig = flat[idx]
            flat[idx] = orig + h
            fp, pp = objective()
            flat[idx] = orig - h
            fm, pm = objective()
            flat[idx] = orig
            if not (np.array_equal(pp, base) and np.array_equal(pm, base)):
                continue
            if isinstance(layer, ReLU) and abs(orig) < 1e-3:
                continue
            numeric = (fp - fm) / (2 * h)
            analytic = gflat[idx] * (1.5 if corrupt else 1.0)
            errs.append(float(rel_error(analytic, numeric)))
            count += 1
        checked += count
    return CheckResult(name or f"layer:{type(layer).__name__}", max(errs), tol, checked)


def tiny_network(seed=0):
    return Network("conv4,relu,pool,conv6,relu,pool,fc8,relu,output6", (8, 8, 2), seed=seed)


def check_network(net: Network, rng, n_points=100, h=1e-6, tol=NET_TOL, loss=None,
                  corrupt_layer=None) -> list:
    """FD check of ``n_points`` random parameters of a composed network.

    Returns one CheckResult per parameterised layer, named ``net:<index><kind>``.
    """
    loss = loss or L2Loss()
    X = rng.uniform(0, 1, (3, *net.input_shape))
    Y = rng.normal(0, 1, (3, net.output_dim))

    def objective():
        pred = net.forward(X)
        value, dpred = batch_loss(loss, pred, Y)
        return value, dpred

    _, dpred = objective()
    base = _pattern(net._caches[1])
    grads = net.backward(dpred)

    slots = [(i, k) for i, p in enumerate(net.params) for k in sorted(p)]
    sizes = np.array([net.params[i][k].size for i, k in slots])
    per_layer = {}
    attempts = 0
    while sum(len(v) for v in per_layer.values()) < n_points and attempts < 50 * n_points:
        attempts += 1
        s = rng.choice(len(slots), p=None if attempts % 2 else sizes / sizes.sum())
        i, k = slots[s]
        flat = net.params[i][k].reshape(-1)
        idx = rng.integers(flat.size)
        orig = flat[idx]
        flat[idx] = orig + h
        fp, _ = objective()
        pp = _pattern(net._caches[1])
        flat[idx] = orig - h
        fm, _ = objective()
        pm = _pattern(net._caches[1])
        flat[idx] = orig
        if not (np.array_equal(pp, base) and np.array_equal(pm, base)):
            continue
        analytic = grads[i][k].reshape(-1)[idx]
        if corrupt_layer is not None and i == corrupt_layer:
            analytic *= 1.5
        per_layer.setdefault(i, []).append(float(rel_error(analytic, (fp - fm) / (2 * h))))
    return [
        CheckResult(f"net:{i}:{net.specs[i]}", max(errs), tol, len(errs))
        for i, errs in sorted(per_layer.items())
    ]


def run_gradcheck(seed=0, loss_tol=LOSS_TOL, net_tol=NET_TOL, corrupt=None) -> list:
    """Full suite: four losses, each layer kind alone, and a tiny composed net.

    ``corrupt`` names a check (e.g. ``"loss:wing"``, ``"layer:Conv3x3"`` or
    ``"net:0"``) whose analytic gradient is deliberately scaled by 1.5, to
    exercise failure reporting.
    """
    rng = np.random.default_rng(seed)
    results = []
    for loss in (L2Loss(), L1Loss(), SmoothL1Loss(), WingLoss(10, 2), WingLoss(4, 0.5)):
        hit = corrupt is not None and loss_label(loss).startswith(corrupt)
        results.append(check_loss(loss, rng, tol=loss_tol, corrupt=hit))
    layers = [
        (Conv3x3(3), (6, 6, 2)),
        (MaxPool2(), (6, 6, 3)),
        (ReLU(), (5, 5, 2)),
        (FullyConnected(4), (3, 3, 2)),
    ]
    for layer, shape in layers:
        name = f"layer:{type(layer).__name__}"
        results.append(check_layer(layer, shape, rng, tol=net_tol, corrupt=(corrupt == name),
                                   name=name))
    corrupt_layer = None
    if corrupt and corrupt.startswith("net:"):
        corrupt_layer = int(corrupt.split(":")[1])
    net = tiny_network(seed)
    results += check_network(net, rng, tol=net_tol, corrupt_layer=corrupt_layer)
    results += [
        CheckResult(r.name.replace("net:", "net-wing:"), r.max_rel_error, r.tolerance, r.n_checked)
        for r in check_network(tiny_network(seed + 1), rng, tol=net_tol, loss=WingLoss(10, 2))
    ]
    return results
