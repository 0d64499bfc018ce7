"""Cross-entropy, backprop through the float suffix, and plain gradient descent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, DataError
from .model import Kind, forward


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 2
    epochs: int = 21
    adaptation_depth_k: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("BAD_TRAIN_CONFIG", "learning_rate must be > 0")
        if self.batch_size < 1 or self.adaptation_depth_k < 1:
            raise ConfigError("BAD_TRAIN_CONFIG", "batch_size and adaptation_depth_k must be >= 1")
        if self.epochs < 0:
            raise ConfigError("BAD_TRAIN_CONFIG", "epochs must be >= 0")


@dataclass
class GradientSet:
    # layer index -> {param name: gradient}
    grads: dict = field(default_factory=dict)

    def items(self):
        for i in sorted(self.grads):
            for name in sorted(self.grads[i]):
                yield i, name, self.grads[i][name]

    def all_finite(self):
        return all(np.all(np.isfinite(g)) for _, _, g in self.items())


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DataError("SHAPE_MISMATCH", f"{labels.shape[0]} labels for {b} logit rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise DataError("LABEL_OUT_OF_RANGE", f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(b)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), (grad / b).astype(logits.dtype)


def backward(model, dlogits):
    """Exact gradients for every float-suffix parameter from the cached forward."""
    if model.cache is None:
        raise DataError("NO_CACHED_FORWARD", "call forward(..., cache=True) first")
    split = model.split
    caches = model.cache
    d = dlogits
    out = GradientSet()
    for i in range(len(model.layers) - 1, split - 1, -1):
        spec, p, c = model.layers[i], model.params[i], caches[i - split]
        need_dx = i > split
        k = spec.kind
        if k == Kind.SOFTMAX:
            continue
        if k == Kind.LINEAR:
            d, dw, db = L.linear_backward(d, p["weight"], c, need_dx)
            out.grads[i] = {"weight": dw, "bias": db}
        elif k == Kind.AVGPOOL_GLOBAL:
            d = L.avgpool_backward(d, c)
        elif k == Kind.RELU:
            d = L.relu_backward(d, c)
        elif k == Kind.BATCHNORM_FOLDED:
            d, dg, db = L.batchnorm_backward(d, p["gamma"], c)
            out.grads[i] = {"gamma": dg, "beta": db}
        elif k == Kind.POINTWISE_CONV2D:
            d, dw = L.pointwise_backward(d, p["weight"], c, need_dx)
            out.grads[i] = {"weight": dw}
        elif k == Kind.DEPTHWISE_CONV2D:
            pads, _ = L.conv_geometry(_in_hw(model, i), spec.kernel, spec.stride, spec.padding)
            d, dw = L.depthwise_backward(d, p["weight"], spec.stride, pads, c, need_dx)
            out.grads[i] = {"weight": dw}
        elif k == Kind.CONV2D:
            pads, _ = L.conv_geometry(_in_hw(model, i), spec.kernel, spec.stride, spec.padding)
            d, dw = L.conv2d_backward(d, p["weight"], spec.stride, pads, c, need_dx)
            out.grads[i] = {"weight": dw}
    return out


def _in_hw(model, i):
    from .model import layer_input_shapes

    return layer_input_shapes(model)[i][1:]


def sgd_step(model, grads, lr):
    """w <- w - lr * g for every trainable parameter; frozen layers are never touched."""
    for i, name, g in grads.items():
        if model.is_frozen(i):
            raise ConfigError("FROZEN_UPDATE", f"layer {i} is frozen")
        w = model.params[i][name]
        if w.shape != g.shape:
            raise DataError("SHAPE_MISMATCH", f"layer {i} {name}: param {w.shape} vs grad {g.shape}")
        model.params[i][name] = (w - lr * g).astype(w.dtype)
    return model


def make_batches(x, y, batch_size, rng=None):
    """Split (x, y) into batches, shuffled once when ``rng`` is given; last batch may be short."""
    order = rng.permutation(len(x)) if rng is not None else np.arange(len(x))
    return [(x[order[s : s + batch_size]], y[order[s : s + batch_size]]) for s in range(0, len(x), batch_size)]


def train_step(model, x, y, lr, bn_training=False):
    logits = forward(model, x, cache=True, training=bn_training)
    loss, dlogits = cross_entropy(logits, y)
    grads = backward(model, dlogits)
    sgd_step(model, grads, lr)
    model.cache = None
    return loss


def train_epoch(model, batches, cfg, bn_training=False):
    """One pass over ``batches``; returns (sample-weighted mean loss, update steps)."""
    if not batches:
        raise DataError("EMPTY_STORE", "no batches to train on")
    total, n, steps = 0.0, 0, 0
    for x, y in batches:
        loss = train_step(model, x, y, cfg.learning_rate, bn_training)
        total += loss * len(y)
        n += len(y)
        steps += 1
    return total / n, steps


def steps_per_epoch(s_dataset, s_batch):
    return math.ceil(s_dataset / s_batch)
