"""DS-CNN S/M/L: layer graph, mixed int8/float forward pass, checkpoints.

A model is a flat list of :class:`LayerSpec` plus one parameter dict per
layer. The trailing ``adaptation_depth_k`` parameterized layers (and every
layer after the first of them) run in float; everything before is frozen,
batch-norm-folded and int8-quantized.

Architecture constants (not published with the results; chosen so the
DS-CNN family meets the per-size parameter and compute budgets):

====  =============  ===========  ========  ======
size  conv1 kernel   conv1 stride  channels  blocks
====  =============  ===========  ========  ======
S     10 x 4         4 x 2         64        4
M     10 x 4         4 x 2         172       4
L     10 x 4         4 x 2         276       5
====  =============  ===========  ========  ======

Every depthwise block is 3 x 3 / stride 1 / SAME, so the 49 x 10 MFCC map
becomes a 13 x 5 map after conv1 and stays that size until global pooling.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from .errors import ConfigError, DataError
from .quant import (
    QuantTensor,
    calibrate_scale,
    deserialize_float,
    deserialize_quant,
    dequantize,
    quantize,
    requantize,
    round_half_away,
    serialize_float,
    serialize_quant,
)


class Kind(str, Enum):
    CONV2D = "CONV2D"
    DEPTHWISE_CONV2D = "DEPTHWISE_CONV2D"
    POINTWISE_CONV2D = "POINTWISE_CONV2D"
    BATCHNORM_FOLDED = "BATCHNORM_FOLDED"
    RELU = "RELU"
    AVGPOOL_GLOBAL = "AVGPOOL_GLOBAL"
    LINEAR = "LINEAR"
    SOFTMAX = "SOFTMAX"


CONV_KINDS = (Kind.CONV2D, Kind.DEPTHWISE_CONV2D, Kind.POINTWISE_CONV2D)
PARAM_KINDS = CONV_KINDS + (Kind.LINEAR,)
KIND_CODES = {k: i for i, k in enumerate(Kind)}


@dataclass(frozen=True)
class LayerSpec:
    kind: Kind
    in_channels: int
    out_channels: int
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: str = "SAME"
    name: str = ""

    def __post_init__(self):
        if self.kind == Kind.DEPTHWISE_CONV2D and self.in_channels != self.out_channels:
            raise ConfigError("BAD_LAYER", "depthwise layers keep the channel count")


@dataclass(frozen=True)
class Arch:
    size_tag: str
    channels: int
    blocks: int
    conv1_kernel: tuple = (10, 4)
    conv1_stride: tuple = (4, 2)
    input_hw: tuple = (49, 10)


ARCHS = {
    "S": Arch("S", 64, 4),
    "M": Arch("M", 172, 4),
    "L": Arch("L", 276, 5),
}


@dataclass(frozen=True)
class ModelBudget:
    size_tag: str
    target_params_bytes: int
    target_forward_mflops: float
    tolerance: float = 0.15


BUDGETS = {
    "S": ModelBudget("S", 23700, 2.95),
    "M": ModelBudget("M", 138100, 17.2),
    "L": ModelBudget("L", 416700, 51.1),
}

VALID_CLASS_COUNTS = (6, 12, 35)


@dataclass
class ModelInstance:
    size_tag: str
    num_classes: int
    layers: list
    params: list
    adaptation_depth_k: int
    input_hw: tuple = (49, 10)
    input_scale: Optional[float] = None
    # calibrated int8 scale of each frozen layer's output (None in the float suffix)
    act_scales: list = field(default_factory=list)
    cache: Optional[list] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.act_scales:
            self.act_scales = [None] * len(self.layers)
        n = self.num_param_layers
        if not 1 <= self.adaptation_depth_k <= n:
            raise ConfigError("BAD_DEPTH", f"k={self.adaptation_depth_k} outside [1, {n}]")
        if self.layers[self.param_layer_indices[-1]].kind != Kind.LINEAR:
            raise ConfigError("BAD_LAYER", "the last parameterized layer must be fc1")

    @property
    def param_layer_indices(self):
        return [i for i, s in enumerate(self.layers) if s.kind in PARAM_KINDS]

    @property
    def num_param_layers(self):
        return len(self.param_layer_indices)

    @property
    def split(self):
        """Index of the first float layer."""
        return self.param_layer_indices[-self.adaptation_depth_k]

    def is_frozen(self, i):
        return i < self.split

    @property
    def fc1(self):
        return self.params[self.param_layer_indices[-1]]

    def trainable_layer_indices(self):
        return [i for i in self.param_layer_indices if i >= self.split] + [
            i for i in range(self.split, len(self.layers)) if self.layers[i].kind == Kind.BATCHNORM_FOLDED
        ]

    def astype(self, dtype):
        """Copy with every float parameter cast to ``dtype`` (frozen codes untouched)."""
        out = copy.deepcopy(self)
        out.cache = None
        for p in out.params:
            for name, v in p.items():
                if isinstance(v, np.ndarray):
                    p[name] = v.astype(dtype)
        return out

    def clone(self):
        out = copy.deepcopy(self)
        out.cache = None
        return out


# --- construction ------------------------------------------------------------

def arch_layers(arch, num_classes):
    c = arch.channels
    specs = [
        LayerSpec(Kind.CONV2D, 1, c, arch.conv1_kernel, arch.conv1_stride, "SAME", "conv1"),
        LayerSpec(Kind.BATCHNORM_FOLDED, c, c, name="conv1_bn"),
        LayerSpec(Kind.RELU, c, c, name="conv1_relu"),
    ]
    for b in range(1, arch.blocks + 1):
        specs += [
            LayerSpec(Kind.DEPTHWISE_CONV2D, c, c, (3, 3), (1, 1), "SAME", f"dw{b}"),
            LayerSpec(Kind.BATCHNORM_FOLDED, c, c, name=f"dw{b}_bn"),
            LayerSpec(Kind.RELU, c, c, name=f"dw{b}_relu"),
            LayerSpec(Kind.POINTWISE_CONV2D, c, c, name=f"pw{b}"),
            LayerSpec(Kind.BATCHNORM_FOLDED, c, c, name=f"pw{b}_bn"),
            LayerSpec(Kind.RELU, c, c, name=f"pw{b}_relu"),
        ]
    specs += [
        LayerSpec(Kind.AVGPOOL_GLOBAL, c, c, name="pool"),
        LayerSpec(Kind.LINEAR, c, num_classes, name="fc1"),
        LayerSpec(Kind.SOFTMAX, num_classes, num_classes, name="softmax"),
    ]
    return specs


def init_params(spec, rng, dtype=np.float32):
    k = spec.kind
    if k == Kind.CONV2D:
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        shape = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
        return {"weight": (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)}
    if k == Kind.DEPTHWISE_CONV2D:
        fan_in = spec.kernel[0] * spec.kernel[1]
        shape = (spec.out_channels, 1) + tuple(spec.kernel)
        return {"weight": (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)}
    if k == Kind.POINTWISE_CONV2D:
        shape = (spec.out_channels, spec.in_channels, 1, 1)
        return {"weight": (rng.standard_normal(shape) * np.sqrt(2.0 / spec.in_channels)).astype(dtype)}
    if k == Kind.BATCHNORM_FOLDED:
        c = spec.out_channels
        return {
            "gamma": np.ones(c, dtype),
            "beta": np.zeros(c, dtype),
            "mean": np.zeros(c, dtype),
            "var": np.ones(c, dtype),
        }
    if k == Kind.LINEAR:
        bound = np.sqrt(6.0 / (spec.in_channels + spec.out_channels))
        w = rng.uniform(-bound, bound, (spec.in_channels, spec.out_channels))
        return {"weight": w.astype(dtype), "bias": np.zeros(spec.out_channels, dtype)}
    return {}


def build_model(size_tag, num_classes, seed=0, arch=None, dtype=np.float32):
    """All-float DS-CNN (every parameterized layer trainable)."""
    if arch is None:
        if size_tag not in ARCHS:
            raise ConfigError("BAD_SIZE", f"size_tag must be one of {sorted(ARCHS)}")
        arch = ARCHS[size_tag]
    if num_classes < 2:
        raise ConfigError("BAD_CLASSES", "need at least two classes")
    specs = arch_layers(arch, num_classes)
    rng = np.random.default_rng(seed)
    params = [init_params(s, rng, dtype) for s in specs]
    n_param = sum(s.kind in PARAM_KINDS for s in specs)
    return ModelInstance(arch.size_tag, num_classes, specs, params, n_param, tuple(arch.input_hw))


def layer_output_shapes(model):
    """Per-sample output shape of every layer, starting from (1, H, W)."""
    shape = (1,) + tuple(model.input_hw)
    shapes = []
    for s in model.layers:
        if s.kind in CONV_KINDS:
            _, (oh, ow) = L.conv_geometry(shape[1:], s.kernel, s.stride, s.padding)
            shape = (s.out_channels, oh, ow)
        elif s.kind == Kind.AVGPOOL_GLOBAL:
            shape = (shape[0],)
        elif s.kind == Kind.LINEAR:
            shape = (s.out_channels,)
        shapes.append(shape)
    return shapes


def layer_input_shapes(model):
    return [(1,) + tuple(model.input_hw)] + layer_output_shapes(model)[:-1]


def layer_param_count(spec):
    """Deployed parameter count: conv weights plus the bias batch-norm folds into."""
    k = spec.kind
    if k == Kind.CONV2D:
        return spec.out_channels * spec.in_channels * spec.kernel[0] * spec.kernel[1] + spec.out_channels
    if k == Kind.DEPTHWISE_CONV2D:
        return spec.out_channels * spec.kernel[0] * spec.kernel[1] + spec.out_channels
    if k == Kind.POINTWISE_CONV2D:
        return spec.out_channels * spec.in_channels + spec.out_channels
    if k == Kind.LINEAR:
        return spec.in_channels * spec.out_channels + spec.out_channels
    return 0


def param_count(model):
    return sum(layer_param_count(s) for s in model.layers)


def param_bytes(model):
    """Deployed model size with every parameter stored as one int8 byte."""
    return param_count(model)


def trainable_param_count(model):
    return sum(layer_param_count(model.layers[i]) for i in model.param_layer_indices if i >= model.split)


def frozen_param_count(model):
    return param_count(model) - trainable_param_count(model)


# --- forward -------------------------------------------------------------

def _float_layer_forward(spec, p, x, training, update_stats, momentum=0.1):
    k = spec.kind
    pads = None
    if k in (Kind.CONV2D, Kind.DEPTHWISE_CONV2D):
        pads, _ = L.conv_geometry(x.shape[2:], spec.kernel, spec.stride, spec.padding)
    if k == Kind.CONV2D:
        return L.conv2d_forward(x, p["weight"], spec.stride, pads)
    if k == Kind.DEPTHWISE_CONV2D:
        return L.depthwise_forward(x, p["weight"], spec.stride, pads)
    if k == Kind.POINTWISE_CONV2D:
        return L.pointwise_forward(x, p["weight"])
    if k == Kind.BATCHNORM_FOLDED:
        out, cache, mu, var = L.batchnorm_forward(x, p["gamma"], p["beta"], p["mean"], p["var"], training)
        if training and update_stats:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * n / max(n - 1, 1)
            p["mean"] = ((1 - momentum) * p["mean"] + momentum * mu).astype(p["mean"].dtype)
            p["var"] = ((1 - momentum) * p["var"] + momentum * unbiased).astype(p["var"].dtype)
        return out, cache
    if k == Kind.RELU:
        return L.relu_forward(x)
    if k == Kind.AVGPOOL_GLOBAL:
        return L.avgpool_forward(x)
    if k == Kind.LINEAR:
        return L.linear_forward(x, p["weight"], p["bias"])
    if k == Kind.SOFTMAX:
        return x, None
    raise ConfigError("BAD_LAYER", f"unknown layer kind {k}")


def _quant_layer_forward(model, i, vals, scale, is_acc):
    """One frozen layer on integer-valued float64 arrays; returns (vals, scale, is_acc)."""
    spec, p = model.layers[i], model.params[i]
    k = spec.kind

    def as_int8():
        if not is_acc:
            return vals, scale
        s_out = model.act_scales[i - 1]
        return requantize(vals, scale / s_out), s_out

    if k in CONV_KINDS:
        q_x, s_x = as_int8()
        w = p["weight"]
        wq = w.q_values.astype(np.float64)
        if k == Kind.CONV2D:
            pads, _ = L.conv_geometry(q_x.shape[2:], spec.kernel, spec.stride, spec.padding)
            acc, _ = L.conv2d_forward(q_x, wq, spec.stride, pads)
        elif k == Kind.DEPTHWISE_CONV2D:
            pads, _ = L.conv_geometry(q_x.shape[2:], spec.kernel, spec.stride, spec.padding)
            acc, _ = L.depthwise_forward(q_x, wq, spec.stride, pads)
        else:
            acc, _ = L.pointwise_forward(q_x, wq)
        s_acc = s_x * w.scale
        bias_acc = round_half_away(dequantize(p["bias"]).astype(np.float64) / s_acc)
        return acc + bias_acc[None, :, None, None], s_acc, True
    if k == Kind.BATCHNORM_FOLDED:
        return vals, scale, is_acc
    if k == Kind.RELU:
        return np.maximum(vals, 0.0), scale, is_acc
    if k == Kind.AVGPOOL_GLOBAL:
        q_x, s_x = as_int8()
        hw = q_x.shape[2] * q_x.shape[3]
        return q_x.sum(axis=(2, 3)), s_x / hw, True
    raise ConfigError("BAD_LAYER", f"{k} cannot be frozen")


def float_dtype(model):
    for i in range(model.split, len(model.layers)):
        for v in model.params[i].values():
            if isinstance(v, np.ndarray):
                return v.dtype
    return np.float32


def forward(model, x, cache=False, training=False):
    """Pre-softmax logits for a batch of (B, 1, H, W) MFCC maps.

    Frozen layers run integer arithmetic; the boundary activation is
    requantized to int8 and dequantized exactly once. With ``cache`` the
    float suffix keeps what backprop needs in ``model.cache``. ``training``
    switches suffix batch-norm layers to batch statistics.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != tuple(model.input_hw):
        raise DataError("SHAPE_MISMATCH", f"expected (B, 1, {model.input_hw[0]}, {model.input_hw[1]}), got {x.shape}")
    if x.shape[0] < 1:
        raise DataError("SHAPE_MISMATCH", "empty batch")
    split = model.split
    dtype = float_dtype(model)
    if split > 0:
        vals = requantize(x.astype(np.float64), 1.0 / model.input_scale)
        scale, is_acc = model.input_scale, False
        for i in range(split):
            vals, scale, is_acc = _quant_layer_forward(model, i, vals, scale, is_acc)
        if is_acc:
            s_out = model.act_scales[split - 1]
            vals, scale = requantize(vals, scale / s_out), s_out
        h = (vals * scale).astype(dtype)
    else:
        h = x.astype(dtype)
    caches = []
    for i in range(split, len(model.layers)):
        h, c = _float_layer_forward(model.layers[i], model.params[i], h, training, update_stats=training)
        caches.append(c)
    model.cache = caches if cache else None
    return h


def predict(model, x, batch_size=256):
    out = [forward(model, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(out).argmax(axis=1)


# --- freezing ---------------------------------------------------------------

def fold_batchnorm(model):
    """Per-layer (weight, bias) for every conv with its following batch norm folded in."""
    folded = {}
    for i, spec in enumerate(model.layers):
        if spec.kind not in CONV_KINDS:
            continue
        w = model.params[i]["weight"].astype(np.float64)
        b = np.zeros(spec.out_channels)
        nxt = i + 1
        if nxt < len(model.layers) and model.layers[nxt].kind == Kind.BATCHNORM_FOLDED:
            bn = model.params[nxt]
            a, shift = L.bn_affine(*(bn[n].astype(np.float64) for n in ("gamma", "beta", "mean", "var")))
            w = w * a[:, None, None, None]
            b = shift
        folded[i] = (w, b)
    return folded


def activation_peaks(model, x, upto):
    """max |output| of layers [0, upto) of the float model over a calibration batch."""
    peaks = np.zeros(upto)
    for start in range(0, len(x), 64):
        h = x[start : start + 64].astype(np.float64)
        for i in range(upto):
            h, _ = _float_layer_forward(model.layers[i], model.params[i], h, False, False)
            peaks[i] = max(peaks[i], float(np.max(np.abs(h))))
    return peaks


def freeze_and_quantize_model(model, calib_inputs, k):
    """Quantize every layer before the trailing ``k`` parameterized layers.

    ``model`` must be all-float; ``calib_inputs`` is a (B, 1, H, W) MFCC batch.
    """
    if model.split != 0:
        raise ConfigError("ALREADY_FROZEN", "freeze an all-float model")
    out = model.clone()
    out.adaptation_depth_k = k
    if not 1 <= k <= model.num_param_layers:
        raise ConfigError("BAD_DEPTH", f"k={k} outside [1, {model.num_param_layers}]")
    split = out.split
    if split == 0:
        return out
    src = model.astype(np.float64)
    out.input_scale = calibrate_scale([calib_inputs])
    peaks = activation_peaks(src, calib_inputs, split)
    out.act_scales = [float(pk) / 127.0 if pk > 0 else 1.0 for pk in peaks] + [None] * (len(out.layers) - split)
    folded = fold_batchnorm(src)
    for i in range(split):
        spec = out.layers[i]
        if spec.kind in CONV_KINDS:
            w, b = folded[i]
            out.params[i] = {
                "weight": quantize(w, calibrate_scale([w])),
                "bias": quantize(b, calibrate_scale([b]) if np.any(b) else 1.0),
            }
        elif spec.kind == Kind.BATCHNORM_FOLDED:
            out.params[i] = {}
    return out


def frozen_digest(model):
    """Hash of every frozen (quantized) parameter byte."""
    h = hashlib.sha256()
    for i in range(model.split):
        for name in sorted(model.params[i]):
            v = model.params[i][name]
            h.update(name.encode())
            h.update(serialize_quant(v))
    return h.hexdigest()


# --- checkpoints ------------------------------------------------------------

MAGIC = b"ODDA1"
VERSION = 1
_HEADER = struct.Struct("<cHHHHdH")
_LAYER = struct.Struct("<BHHHHBIIBdB")
PAD_CODES = {"SAME": 0, "VALID": 1}
PREC_NONE, PREC_QUANT, PREC_FLOAT = 0, 1, 2


def checkpoint_bytes(model):
    buf = bytearray(MAGIC)
    buf.append(VERSION)
    buf += _HEADER.pack(
        model.size_tag.encode("ascii")[:1],
        model.num_classes,
        model.adaptation_depth_k,
        model.input_hw[0],
        model.input_hw[1],
        model.input_scale or 0.0,
        len(model.layers),
    )
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        prec = PREC_NONE if not p else PREC_QUANT if model.is_frozen(i) else PREC_FLOAT
        buf += _LAYER.pack(
            KIND_CODES[spec.kind],
            spec.kernel[0],
            spec.kernel[1],
            spec.stride[0],
            spec.stride[1],
            PAD_CODES[spec.padding],
            spec.in_channels,
            spec.out_channels,
            prec,
            model.act_scales[i] or 0.0,
            len(p),
        )
        name = spec.name.encode("utf-8")
        buf += bytes([len(name)]) + name
        for key in sorted(p):
            kb = key.encode("ascii")
            buf += bytes([len(kb)]) + kb
            v = p[key]
            buf += serialize_quant(v) if isinstance(v, QuantTensor) else serialize_float(v)
    return bytes(buf)


def save_checkpoint(model, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(model)
    path.write_bytes(data)
    return len(data)


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise DataError("TRUNCATED", f"checkpoint ends inside {what}")
    return buf[pos : pos + n], pos + n


def parse_checkpoint(buf):
    if buf[: len(MAGIC)] != MAGIC:
        raise DataError("BAD_MAGIC", "not an ODDA1 checkpoint")
    pos = len(MAGIC)
    raw, pos = _take(buf, pos, 1, "version")
    if raw[0] != VERSION:
        raise DataError("VERSION_MISMATCH", f"checkpoint version {raw[0]}, reader supports {VERSION}")
    raw, pos = _take(buf, pos, _HEADER.size, "model header")
    tag, n_cls, k, ih, iw, in_scale, n_layers = _HEADER.unpack(raw)
    kinds = list(Kind)
    specs, params, act_scales = [], [], []
    for _ in range(n_layers):
        raw, pos = _take(buf, pos, _LAYER.size, "layer record")
        kc, kh, kw, sh, sw, pad, cin, cout, prec, act, n_t = _LAYER.unpack(raw)
        raw, pos = _take(buf, pos, 1, "layer name")
        raw, pos = _take(buf, pos, raw[0], "layer name")
        name = raw.decode("utf-8")
        padding = "SAME" if pad == 0 else "VALID"
        specs.append(LayerSpec(kinds[kc], cin, cout, (kh, kw), (sh, sw), padding, name))
        act_scales.append(act if act > 0 else None)
        p = {}
        for _ in range(n_t):
            raw, pos = _take(buf, pos, 1, "tensor name")
            raw, pos = _take(buf, pos, raw[0], "tensor name")
            key = raw.decode("ascii")
            if prec == PREC_QUANT:
                p[key], pos = deserialize_quant(buf, pos)
            else:
                p[key], pos = deserialize_float(buf, pos)
        params.append(p)
    if pos != len(buf):
        raise DataError("TRUNCATED", f"{len(buf) - pos} unexpected trailing bytes")
    return ModelInstance(
        tag.decode("ascii"), n_cls, specs, params, k, (ih, iw), in_scale if in_scale > 0 else None, act_scales
    )


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError("MISSING_FILE", f"checkpoint {path} does not exist")
    return parse_checkpoint(path.read_bytes())
