import itertools

import numpy as np
import pytest

from ternia import core, datasets, qat
from ternia.core import Dataset, Layer
from ternia.qat import Network, QatConfig
from ternia.quant import dequantize, dequantized_model, quantize

from conftest import qat_config, qat_task

OPS = ("naive", "tquant", "mquant")


def fd_grad(loss_fn, w, eps=1e-6):
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        orig = w[idx]
        w[idx] = orig + eps
        up = loss_fn()
        w[idx] = orig - eps
        down = loss_fn()
        w[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def one_layer(w, b=None):
    b = np.zeros(len(w)) if b is None else b
    return [Layer("dense", {"weights": np.array(w, float), "bias": np.array(b, float)}, {"in": w.shape[1], "out": len(w)})]


def test_ternary_oracle_separates_two_parameter_model():
    data = datasets.linearly_separable(400, dim=2, margin=0.3, seed=0)
    x = data.features.astype(np.float64)
    best = 0.0
    # logit difference of a 2-parameter ternary model: w . x
    for w in itertools.product((-1, 0, 1), repeat=2):
        pred = (x @ np.array(w, float) > 0).astype(int)
        best = max(best, float(np.mean(pred == data.labels)))
    assert best == 1.0


@pytest.mark.parametrize("op", OPS)
def test_separable_task_reaches_95_percent(op):
    data = datasets.linearly_separable(600, dim=2, margin=0.3, seed=0)
    train, test = datasets.split(data, 0.3, seed=0)
    cfg = QatConfig(arch="mlp:8", epochs=10, lr=0.05, op=op, abits=4, seeds=(0, 1))
    summary = qat.ste_train(train, cfg, test, workers=1)
    assert min(summary.accuracies) >= 0.95


def test_ste_gradient_is_float_gradient_at_quantized_weights():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(32, 5)), rng.integers(0, 3, 32)
    for op in OPS:
        w = rng.normal(size=(3, 5))
        net = Network(one_layer(w), (5,), qat.ternary_weight_quantizer(op))
        _, grads = net.loss_and_grads(x, y)
        w_hat = dequantize(quantize(w, op), np.float64)
        ref = Network(one_layer(w_hat), (5,))
        num = fd_grad(lambda: qat.softmax_xent(ref.forward(x)[0], y)[0], ref.layers[0].params["weights"])
        np.testing.assert_allclose(grads[0]["weights"], num, rtol=1e-4, atol=1e-9)


def test_ste_gradient_on_grid_equals_full_precision_gradient():
    rng = np.random.default_rng(1)
    codes = rng.integers(-1, 2, size=(3, 6))
    codes[:, 0] = 1  # pin the row range so the grid reproduces itself
    w = 0.7 * codes.astype(float)
    x, y = rng.normal(size=(16, 6)), rng.integers(0, 3, 16)
    net = Network(one_layer(w), (6,), qat.ternary_weight_quantizer("naive"))
    _, grads = net.loss_and_grads(x, y)
    fp = Network(one_layer(w.copy()), (6,))
    num = fd_grad(lambda: qat.softmax_xent(fp.forward(x)[0], y)[0], fp.layers[0].params["weights"])
    np.testing.assert_allclose(grads[0]["weights"], num, rtol=1e-4, atol=1e-9)


@pytest.mark.parametrize("arch,shape", [("mlp:7,5", (4,)), ("cnn:3,2", (2, 5, 4))])
def test_float_backward_matches_finite_differences(arch, shape):
    rng = np.random.default_rng(2)
    cfg = QatConfig(arch=arch, op=None, abits=None)
    net = qat.make_network(cfg, shape, 3, seed=0)
    x, y = rng.normal(size=(6,) + shape), rng.integers(0, 3, 6)
    _, grads = net.loss_and_grads(x, y)

    def loss():
        return qat.softmax_xent(net.forward(x)[0], y)[0]

    for i, layer in enumerate(net.layers):
        for name in ("weights", "bias") if layer.is_weighted else ():
            num = fd_grad(loss, layer.params[name])
            np.testing.assert_allclose(grads[i][name], num, rtol=1e-4, atol=1e-7)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(3)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        x = rng.normal(size=(2, 3, 6, 5))
        cols = core.im2col(x, 3, 3, stride, pad)
        d = rng.normal(size=cols.shape)
        lhs = float(np.sum(cols * d))
        rhs = float(np.sum(x * qat.col2im(d, x.shape, 3, 3, stride, pad)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_clipped_ste_zeroes_gradient_outside_range():
    def clipping(w):
        return np.clip(w, -0.5, 0.5), np.abs(w) <= 0.5

    w = np.array([[0.2, 0.9, -0.7, -0.1], [0.3, -0.4, 0.6, 0.0]])
    net = Network(one_layer(w), (4,), clipping)
    x, y = np.ones((3, 4)), np.zeros(3, int)
    _, grads = net.loss_and_grads(x, y)
    g = grads[0]["weights"]
    inside = np.abs(w) <= 0.5
    assert np.all(g[~inside] == 0) and np.all(g[inside] != 0)


def test_identity_hook_reproduces_float_training_bit_for_bit():
    train, _ = qat_task()
    cfg = QatConfig(arch="mlp:8", epochs=2, op=None, abits=None)
    a = qat.make_network(cfg, (2,), 4, seed=5)
    b = qat.make_network(cfg, (2,), 4, seed=5, quantizer=qat.identity_quantizer)
    qat.train_network(a, train, cfg, 5)
    qat.train_network(b, train, cfg, 5)
    for la, lb in zip(a.layers, b.layers):
        for name in la.params:
            assert la.params[name].tobytes() == lb.params[name].tobytes()


def test_master_weights_stay_full_precision():
    train, _ = qat_task()
    cfg = qat_config("tquant", seeds=(0,))
    net = qat.make_network(cfg, (2,), 4, seed=0)
    qat.train_network(net, train, cfg, 0)
    w = net.layers[0].params["weights"]
    assert w.dtype == np.float64
    assert len(np.unique(np.abs(w))) > 3


def test_seed_determinism():
    train, test = qat_task()
    cfg = QatConfig(arch="mlp:8", epochs=2, op="mquant", seeds=(3, 4))
    a = qat.ste_train(train, cfg, test, workers=1).to_dict()
    b = qat.ste_train(train, cfg, test, workers=2).to_dict()
    assert a == b


def test_evaluation_matches_last_epoch_metric():
    train, _ = qat_task()
    cfg = qat_config("tquant", seeds=(0,))
    net = qat.make_network(cfg, (2,), 4, seed=0)
    history = qat.train_network(net, train, cfg, 0)
    assert qat.evaluate_quantized(net, train) == history[-1]
    assert qat.evaluate_quantized(net, train) == qat.evaluate_quantized(net, train)


def test_constant_logit_model_scores_class_prior():
    labels = np.array([0, 1, 1, 2, 1, 0, 2, 2, 2])
    data = Dataset(np.zeros((9, 3), np.float32), labels)
    net = Network(one_layer(np.zeros((3, 3)), [0.0, 0.0, 1.0]), (3,))
    assert qat.evaluate_quantized(net, data) == pytest.approx(4 / 9)


def test_divergence_is_reported_per_seed():
    train, test = qat_task()
    cfg = QatConfig(arch="mlp:8", epochs=3, lr=1e6, momentum=0.9, op=None, abits=None, seeds=(0,))
    with np.errstate(all="ignore"):
        summary = qat.ste_train(train, cfg, test, workers=1)
    assert summary.diverged_seeds == [0]
    assert np.isnan(summary.accuracies[0])


def test_activation_ranges_follow_running_max():
    train, _ = qat_task()
    cfg = qat_config("naive", seeds=(0,))
    net = qat.make_network(cfg, (2,), 4, seed=0)
    x = train.features[:64].astype(np.float64)
    net.forward(x, train=True)
    first = {k: v.copy() for k, v in net.act_ranges.items()}
    net.forward(x[:8] * 0.1, train=True)
    for k in first:
        np.testing.assert_array_equal(net.act_ranges[k], first[k])
    net.forward(x * 10, train=True)
    assert all(np.all(net.act_ranges[k] >= first[k]) for k in first)


def test_export_matches_training_forward():
    train, _ = qat_task()
    cfg = QatConfig(arch="mlp:8", epochs=2, op="tquant", abits=None)
    net = qat.make_network(cfg, (2,), 4, seed=0)
    qat.train_network(net, train, cfg, 0)
    model, stacks = qat.export_quantized(net, "tquant")
    got = core.forward(dequantized_model(model, stacks), train.features).astype(np.float64)
    np.testing.assert_allclose(got, net.predict(train.features.astype(np.float64)), rtol=1e-4, atol=1e-4)


def test_config_validation():
    with pytest.raises(ValueError):
        QatConfig(op="tquant", wbits=4)
    with pytest.raises(ValueError):
        QatConfig(seeds=())
    with pytest.raises(ValueError):
        QatConfig(arch="rnn:3")


def test_qat_trend_on_toy_task():
    train, test = qat_task()
    means = {op: qat.ste_train(train, qat_config(op), test).mean for op in OPS}
    assert means["tquant"] >= means["mquant"] >= means["naive"], means
