import math

import numpy as np
import pytest

from odda import layers as L
from odda.errors import ConfigError, DataError
from odda.model import Arch, build_model, forward, freeze_and_quantize_model, frozen_digest
from odda.train import (
    GradientSet,
    TrainConfig,
    backward,
    cross_entropy,
    make_batches,
    sgd_step,
    steps_per_epoch,
    train_epoch,
)

TINY = Arch("S", 8, 2)


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def _fd(f, x, h, idx=None):
    """Central differences of scalar f w.r.t. x at flat indices ``idx`` (all by default)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


# --- loss -----------------------------------------------------------------

def test_uniform_logits():
    loss, grad = cross_entropy(np.zeros((3, 12)), [0, 5, 11])
    assert loss == pytest.approx(math.log(12), abs=1e-12)
    assert loss == pytest.approx(2.4849, abs=1e-4)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_confident_limit():
    logits = np.zeros((2, 12))
    logits[[0, 1], [3, 7]] = 1e4
    loss, _ = cross_entropy(logits, [3, 7])
    assert 0.0 <= loss < 1e-12


def test_label_out_of_range():
    with pytest.raises(DataError) as e:
        cross_entropy(np.zeros((2, 12)), [0, 12])
    assert e.value.code == "LABEL_OUT_OF_RANGE"


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 2, (4, 12))
    labels = rng.integers(0, 12, 4)
    _, grad = cross_entropy(logits, labels)
    num = _fd(lambda: cross_entropy(logits, labels)[0], logits, 1e-3)
    assert _rel(grad, num) <= 1e-4
    assert cross_entropy(logits, labels)[0] >= 0.0


# --- per-kind layer checks ---------------------------------------------------

def _check_layer(fwd, bwd, x, params, rng, tol):
    out, cache = fwd()
    dout = rng.standard_normal(out.shape)
    grads = bwd(dout, cache)
    f = lambda: float(np.sum(fwd()[0] * dout))
    for arr, g in zip([x] + params, grads):
        n = arr.size
        idx = rng.choice(n, size=min(n, 40), replace=False)
        num = _fd(f, arr, 1e-5, idx)
        assert _rel(g.reshape(-1)[idx], num) <= tol


@pytest.mark.parametrize("seed", range(20))
def test_conv2d_grad(seed):
    rng = np.random.default_rng(seed)
    c, o = rng.integers(1, 4, 2)
    kh, kw = rng.integers(1, 5, 2)
    sh, sw = rng.integers(1, 3, 2)
    x = rng.standard_normal((2, c, rng.integers(kh, 9), rng.integers(kw, 9)))
    w = rng.standard_normal((o, c, kh, kw))
    pads, _ = L.conv_geometry(x.shape[2:], (kh, kw), (sh, sw), "SAME")
    _check_layer(
        lambda: L.conv2d_forward(x, w, (sh, sw), pads),
        lambda d, cache: L.conv2d_backward(d, w, (sh, sw), pads, cache),
        x, [w], rng, 1e-3,
    )


@pytest.mark.parametrize("seed", range(20))
def test_depthwise_grad(seed):
    rng = np.random.default_rng(seed)
    c = rng.integers(1, 5)
    s = tuple(rng.integers(1, 3, 2))
    x = rng.standard_normal((2, c, rng.integers(3, 9), rng.integers(3, 9)))
    w = rng.standard_normal((c, 1, 3, 3))
    pads, _ = L.conv_geometry(x.shape[2:], (3, 3), s, "SAME")
    _check_layer(
        lambda: L.depthwise_forward(x, w, s, pads),
        lambda d, cache: L.depthwise_backward(d, w, s, pads, cache),
        x, [w], rng, 1e-3,
    )


@pytest.mark.parametrize("seed", range(20))
def test_pointwise_grad(seed):
    rng = np.random.default_rng(seed)
    c, o = rng.integers(1, 6, 2)
    x = rng.standard_normal((3, c, 4, 3))
    w = rng.standard_normal((o, c, 1, 1))
    _check_layer(
        lambda: L.pointwise_forward(x, w),
        lambda d, cache: L.pointwise_backward(d, w, cache),
        x, [w], rng, 1e-3,
    )


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("training", [False, True])
def test_batchnorm_grad(seed, training):
    rng = np.random.default_rng(seed)
    c = rng.integers(1, 5)
    x = rng.standard_normal((3, c, 4, 3))
    gamma, beta = rng.normal(1, 0.3, c), rng.standard_normal(c)
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2, c)

    def fwd():
        out, cache, _, _ = L.batchnorm_forward(x, gamma, beta, mean, var, training)
        return out, cache

    _check_layer(fwd, lambda d, cache: L.batchnorm_backward(d, gamma, cache), x, [gamma, beta], rng, 1e-3)


@pytest.mark.parametrize("seed", range(20))
def test_linear_grad(seed):
    rng = np.random.default_rng(seed)
    i, o = rng.integers(1, 20, 2)
    x, w, b = rng.standard_normal((4, i)), rng.standard_normal((i, o)), rng.standard_normal(o)
    _check_layer(
        lambda: L.linear_forward(x, w, b),
        lambda d, cache: L.linear_backward(d, w, cache),
        x, [w, b], rng, 1e-4,
    )


@pytest.mark.parametrize("seed", range(20))
def test_relu_pool_grad(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    _check_layer(lambda: L.relu_forward(x), lambda d, c: (L.relu_backward(d, c),), x, [], rng, 1e-4)
    _check_layer(lambda: L.avgpool_forward(x), lambda d, c: (L.avgpool_backward(d, c),), x, [], rng, 1e-4)


# --- model backward ---------------------------------------------------------

def _loss_fn(model, x, y, training=False):
    return lambda: cross_entropy(forward(model, x, training=training), y)[0]


def _frozen_k1(seed=0):
    m = build_model("S", 12, seed=seed)
    x = np.random.default_rng(seed).normal(0, 3, (16, 1, 49, 10)).astype(np.float32)
    return freeze_and_quantize_model(m, x, 1).astype(np.float64)


def test_fc1_gradient_fd():
    m = _frozen_k1()
    rng = np.random.default_rng(1)
    x, y = rng.normal(0, 3, (4, 1, 49, 10)), rng.integers(0, 12, 4)
    logits = forward(m, x, cache=True)
    _, dl = cross_entropy(logits, y)
    grads = backward(m, dl)
    assert sorted(grads.grads) == [m.split]
    pooled = m.cache[0][0]
    np.testing.assert_allclose(grads.grads[m.split]["weight"], pooled.T @ dl, rtol=1e-12)
    f = _loss_fn(m, x, y)
    for name in ("weight", "bias"):
        num = _fd(f, m.fc1[name], 1e-3)
        assert _rel(grads.grads[m.split][name], num) <= 1e-4
    assert m.fc1["weight"].size + m.fc1["bias"].size == 780


def test_zero_logit_gradient():
    m = _frozen_k1()
    forward(m, np.ones((2, 1, 49, 10)), cache=True)
    grads = backward(m, np.zeros((2, 12)))
    assert all(not np.any(g) for _, _, g in grads.items())
    assert grads.all_finite()


def test_no_cached_forward():
    m = _frozen_k1()
    with pytest.raises(DataError) as e:
        backward(m, np.zeros((1, 12)))
    assert e.value.code == "NO_CACHED_FORWARD"


@pytest.mark.parametrize("training", [False, True])
def test_full_depth_fd(training):
    m = build_model("S", 12, seed=5, arch=TINY, dtype=np.float64)
    rng = np.random.default_rng(2)
    for p in m.params:
        if "mean" in p:
            p["gamma"] = rng.normal(1, 0.2, p["gamma"].shape)
            p["beta"] = rng.normal(0, 0.2, p["beta"].shape)
            p["mean"] = rng.normal(0, 0.2, p["mean"].shape)
            p["var"] = rng.uniform(0.5, 2, p["var"].shape)
    x, y = rng.normal(0, 3, (3, 1, 49, 10)), rng.integers(0, 12, 3)
    stats = [dict(p) for p in m.params]
    logits = forward(m, x, cache=True, training=training)
    grads = backward(m, cross_entropy(logits, y)[1])
    # running-stat updates must not leak into the loss we differentiate
    for p, s in zip(m.params, stats):
        p.update(s)
    f = _loss_fn(m, x, y, training)
    seen = set()
    for i, name, g in grads.items():
        seen.add(m.layers[i].kind)
        arr = m.params[i][name]
        idx = rng.choice(arr.size, size=min(arr.size, 30), replace=False)
        num = _fd(f, arr, 1e-5, idx)
        assert _rel(g.reshape(-1)[idx], num) <= 1e-3, (m.layers[i].name, name)
    assert len(seen) == 5


# --- updates ------------------------------------------------------------------

def test_sgd_arithmetic():
    m = build_model("S", 12)
    i = m.param_layer_indices[-1]
    m.fc1["bias"][0] = 1.0
    g = GradientSet({i: {"bias": np.full(12, 0.5, np.float32)}})
    sgd_step(m, g, 0.1)
    assert m.fc1["bias"][0] == pytest.approx(0.95)
    before = m.fc1["bias"].copy()
    sgd_step(m, g, 0.0)
    np.testing.assert_array_equal(m.fc1["bias"], before)


def test_sgd_guards():
    m = _frozen_k1()
    with pytest.raises(ConfigError) as e:
        sgd_step(m, GradientSet({0: {"weight": np.zeros(1)}}), 0.1)
    assert e.value.code == "FROZEN_UPDATE"
    with pytest.raises(DataError) as e:
        sgd_step(m, GradientSet({m.split: {"bias": np.zeros(3)}}), 0.1)
    assert e.value.code == "SHAPE_MISMATCH"


def _toy(n=100, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 12
    x = rng.normal(0, 1, (n, 1, 49, 10)) + (y[:, None, None, None] - 6) * 0.6
    return x.astype(np.float32), y


def test_frozen_bytes_after_100_steps():
    m = _frozen_k1().astype(np.float32)
    digest = frozen_digest(m)
    x, y = _toy()
    cfg = TrainConfig(0.01, 2, 2, 1, 0)
    _, steps = train_epoch(m, make_batches(x, y, 2, np.random.default_rng(0)), cfg)
    _, steps2 = train_epoch(m, make_batches(x, y, 2, np.random.default_rng(1)), cfg)
    assert steps + steps2 == 100
    assert frozen_digest(m) == digest


def test_step_counts():
    x, y = _toy()
    assert len(make_batches(x, y, 2)) == 50 == steps_per_epoch(100, 2)
    assert len(make_batches(x, y, 100)) == 1
    last = make_batches(x[:7], y[:7], 2)[-1]
    assert len(last[1]) == 1
    m = _frozen_k1().astype(np.float32)
    assert train_epoch(m, make_batches(x, y, 100), TrainConfig(0.01, 100, 1))[1] == 1
    with pytest.raises(DataError):
        train_epoch(m, [], TrainConfig())


def test_loss_decreases():
    m = _frozen_k1().astype(np.float32)
    x, y = _toy()
    cfg = TrainConfig(0.01, 2, 4, 1, 0)
    rng = np.random.default_rng(0)
    losses = [train_epoch(m, make_batches(x, y, 2, rng), cfg)[0] for _ in range(4)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_deterministic():
    x, y = _toy()
    finals = []
    for _ in range(2):
        m = _frozen_k1().astype(np.float32)
        rng = np.random.default_rng(4)
        for _ in range(2):
            train_epoch(m, make_batches(x, y, 2, rng), TrainConfig(0.01, 2, 2))
        finals.append(m.fc1["weight"].tobytes() + m.fc1["bias"].tobytes())
    assert finals[0] == finals[1]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(adaptation_depth_k=0)
