import numpy as np
import pytest
from sklearn.base import clone

from wingloss.eval import NormalisationRule, nme
from wingloss.gradcheck import check_network, tiny_network
from wingloss.losses import L2Loss, WingLoss
from wingloss.net import (
    BackwardStateError,
    CheckpointError,
    GeometryError,
    LandmarkRegressor,
    Network,
    TrainConfig,
    TrainingDivergedError,
    cnn6_layers,
    cnn7_layers,
    layer_shapes,
    learning_rate,
    parse_layers,
    train,
)
from wingloss.net.train import loss_and_grad, sgd_step

SMALL = "conv4,relu,pool,fc8,relu,output4"


def zeroed(net):
    for p in net.params:
        for v in p.values():
            v[...] = 0.0
    return net


def test_zero_weights_give_zero_output():
    net = zeroed(Network(SMALL, (6, 6, 1)))
    X = np.random.default_rng(0).uniform(0, 1, (3, 6, 6, 1))
    np.testing.assert_array_equal(net.forward(X), np.zeros((3, 4)))
    net.params[-1]["b"][:] = [1, 2, 3, 4]
    np.testing.assert_array_equal(net.forward(X), np.tile([1.0, 2, 3, 4], (3, 1)))


def test_forward_is_deterministic():
    X = np.random.default_rng(1).uniform(0, 1, (2, 6, 6, 1))
    a, b = Network(SMALL, (6, 6, 1), seed=3), Network(SMALL, (6, 6, 1), seed=3)
    np.testing.assert_array_equal(a.forward(X), b.forward(X))
    np.testing.assert_array_equal(a.forward(X), a.predict(X))
    assert not np.array_equal(a.flat_params(), Network(SMALL, (6, 6, 1), seed=4).flat_params())


def test_zero_output_gradient_gives_zero_gradients():
    net = Network(SMALL, (6, 6, 1))
    net.forward(np.random.default_rng(0).uniform(0, 1, (2, 6, 6, 1)))
    for g in net.backward(np.zeros((2, 4))):
        for v in g.values():
            assert not v.any()


def test_single_fc_gradient_is_outer_product():
    rng = np.random.default_rng(0)
    net = Network("output3", (2, 2, 1))
    X = rng.uniform(0, 1, (5, 2, 2, 1))
    g = rng.normal(size=(5, 3))
    net.forward(X)
    grads = net.backward(g)
    np.testing.assert_allclose(grads[0]["W"], X.reshape(5, -1).T @ g, atol=1e-14)
    np.testing.assert_allclose(grads[0]["b"], g.sum(axis=0), atol=1e-14)


@pytest.mark.parametrize("loss", [L2Loss(), WingLoss(10, 2)], ids=repr)
def test_composed_network_gradients_match_finite_differences(loss):
    results = check_network(tiny_network(2), np.random.default_rng(5), loss=loss)
    assert sum(r.n_checked for r in results) >= 100
    for r in results:
        assert r.max_rel_error < 1e-4, r


def test_backward_without_forward():
    net = Network(SMALL, (6, 6, 1))
    with pytest.raises(BackwardStateError):
        net.backward(np.zeros((1, 4)))
    net.predict(np.zeros((1, 6, 6, 1)))
    with pytest.raises(BackwardStateError):
        net.backward(np.zeros((1, 4)))
    net.forward(np.zeros((2, 6, 6, 1)))
    with pytest.raises(BackwardStateError):
        net.backward(np.zeros((1, 4)))


def test_geometry_errors():
    net = Network(SMALL, (6, 6, 1))
    with pytest.raises(GeometryError):
        net.forward(np.zeros((1, 8, 8, 1)))
    with pytest.raises(GeometryError):
        layer_shapes("pool,pool,pool,output2", (4, 4, 1))
    with pytest.raises(GeometryError):
        layer_shapes("fc4,conv2,output2", (4, 4, 1))
    with pytest.raises(GeometryError):
        layer_shapes("conv4,relu", (4, 4, 1))
    bad = [{k: np.full_like(v, np.nan) for k, v in p.items()} for p in net.params]
    with pytest.raises(GeometryError):
        Network(SMALL, (6, 6, 1), params=bad)


def test_reference_architectures():
    shapes6 = layer_shapes(cnn6_layers(5), (64, 64, 3))
    assert shapes6[14] == (2, 2, 512) and shapes6[-1] == (10,)
    shapes7 = layer_shapes(cnn7_layers(34), (128, 128, 3))
    assert shapes7[17] == (2, 2, 512) and shapes7[-1] == (68,)
    assert parse_layers(cnn7_layers(34))[0].size == 64
    with pytest.raises(GeometryError):
        layer_shapes(cnn7_layers(34), (32, 32, 3))


def test_checkpoint_roundtrip(tmp_path):
    net = Network(SMALL, (6, 6, 1), seed=9)
    net.save(tmp_path / "n.wnet")
    back = Network.load(tmp_path / "n.wnet")
    assert back.to_bytes() == net.to_bytes()
    X = np.random.default_rng(0).uniform(0, 1, (2, 6, 6, 1))
    np.testing.assert_array_equal(back.forward(X), net.forward(X))
    data = net.to_bytes()
    with pytest.raises(CheckpointError):
        Network.from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError):
        Network.from_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        Network.from_bytes(data + b"\0")


# --------------------------------------------------------------------------
# optimisation


def batch(rng, n=6):
    return rng.uniform(0, 1, (n, 6, 6, 1)), rng.uniform(0, 1, (n, 4))


def test_zero_learning_rate_leaves_parameters_unchanged():
    rng = np.random.default_rng(0)
    X, Y = batch(rng)
    net = Network(SMALL, (6, 6, 1))
    before = net.flat_params()
    cfg = TrainConfig(loss=L2Loss(), lr=0.0, lr_final=0.0, iterations=20, batch_size=3)
    train(net, X, Y, cfg)
    np.testing.assert_array_equal(net.flat_params(), before)


def test_full_batch_gradient_is_mean_of_sample_gradients():
    rng = np.random.default_rng(1)
    X, Y = batch(rng)
    net = Network(SMALL, (6, 6, 1), seed=1)
    _, full = loss_and_grad(net, X, Y, WingLoss(10, 2), coord_scale=6.0)
    per = [loss_and_grad(net, X[i : i + 1], Y[i : i + 1], WingLoss(10, 2), 6.0)[1] for i in range(6)]
    for k, g in enumerate(full):
        for name, v in g.items():
            mean = np.mean([p[k][name] for p in per], axis=0)
            np.testing.assert_allclose(v, mean, rtol=0, atol=1e-10)


def test_weight_decay_equals_gradient_of_l2_penalty():
    rng = np.random.default_rng(2)
    X, Y = batch(rng)
    net = Network(SMALL, (6, 6, 1), seed=2)
    _, grads = loss_and_grad(net, X, Y, L2Loss())
    lam, lr = 0.01, 0.1
    a, b = net.copy(), net.copy()
    zeros = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
    sgd_step(a, grads, [dict((k, v.copy()) for k, v in z.items()) for z in zeros], lr, 0.9, lam)
    penalised = [{k: g[k] + lam * p[k] for k in g} for g, p in zip(grads, net.params)]
    sgd_step(b, penalised, zeros, lr, 0.9, 0.0)
    np.testing.assert_allclose(a.flat_params(), b.flat_params(), rtol=0, atol=1e-10)


def test_learning_rate_schedule_is_log_linear():
    cfg = TrainConfig(lr=3e-4, lr_final=3e-6, iterations=101)
    assert learning_rate(cfg, 0) == pytest.approx(3e-4)
    assert learning_rate(cfg, 50) == pytest.approx(3e-5)
    assert learning_rate(cfg, 100) == pytest.approx(3e-6)
    rates = [learning_rate(cfg, i) for i in range(101)]
    np.testing.assert_allclose(np.diff(np.log(rates)), np.log(1e-2) / 100)


def test_divergence_reports_iteration_and_rate():
    rng = np.random.default_rng(3)
    X, Y = batch(rng)
    cfg = TrainConfig(loss=L2Loss(), lr=1e6, lr_final=1e6, momentum=0.0, iterations=200, coord_scale=100)
    with pytest.raises(TrainingDivergedError) as exc:
        train(Network(SMALL, (6, 6, 1)), X, Y, cfg)
    assert exc.value.lr == 1e6
    assert f"iteration {exc.value.iteration}" in str(exc.value)


def test_bad_train_config():
    for kwargs in ({"lr": -1}, {"momentum": 1.0}, {"batch_size": 0}, {"lr": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs).validate()


def test_linear_data_is_fitted_like_least_squares():
    rng = np.random.default_rng(4)
    n = 200
    X = rng.uniform(0, 1, (n, 3, 3, 1))
    A = rng.normal(0, 0.05, (9, 4))
    Y = 0.5 + (X.reshape(n, -1) - 0.5) @ A
    design = np.hstack([X.reshape(n, -1), np.ones((n, 1))])
    coef, *_ = np.linalg.lstsq(design, Y, rcond=None)
    oracle = design @ coef

    net = Network("output4", (3, 3, 1), seed=0)
    cfg = TrainConfig(loss=L2Loss(), lr=0.05, lr_final=0.005, weight_decay=0.0,
                      batch_size=16, iterations=3000)
    train(net, X, Y, cfg)
    pred = net.predict(X)

    def mean_nme(p):
        return np.mean([nme(a, b, NormalisationRule(), bbox=(0, 0, 1, 1)) for a, b in zip(p, Y)])

    assert mean_nme(oracle) < 1e-12
    assert mean_nme(pred) < 1e-3


# --------------------------------------------------------------------------
# estimator


def test_estimator_api():
    rng = np.random.default_rng(5)
    X = rng.uniform(0, 1, (12, 8, 8, 1))
    y = rng.uniform(0.3, 0.7, (12, 4))
    est = LandmarkRegressor(layers="conv2,relu,pool,fc4,relu", n_iter=5, batch_size=4)
    assert clone(est).get_params() == est.get_params()
    est.fit(X, y)
    assert est.predict(X).shape == (12, 4)
    assert est.network_.specs[-1].size == 4
    assert est.train_config(X.shape[1:]).coord_scale == 8.0
    assert est.score(X, y) <= 0
    with pytest.raises(ValueError):
        est.predict(X * 2)
    with pytest.raises(GeometryError):
        est.predict(np.zeros((1, 6, 6, 1)))


def test_estimator_output_bias_starts_at_mean_target():
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 1, (6, 8, 8, 1))
    y = rng.uniform(0.3, 0.7, (6, 4))
    est = LandmarkRegressor(layers="fc4,relu", n_iter=1, lr=1e-12, lr_final=1e-12).fit(X, y)
    np.testing.assert_allclose(est.network_.params[-1]["b"], y.mean(axis=0), atol=1e-9)
