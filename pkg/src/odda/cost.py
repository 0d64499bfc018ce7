"""Analytical FLOP, memory, storage, latency and energy accounting.

One FLOP is one floating-point addition or multiplication. Counts are per
sample (batch of one); convolutions count every kernel tap, including taps
that land on SAME padding.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

from .audio_io import BYTES_PER_SAMPLE, UTTERANCE_SAMPLES
from .errors import ConfigError
from .model import CONV_KINDS, PARAM_KINDS, Kind, layer_input_shapes, layer_output_shapes, param_bytes

FLOAT_BYTES = 4
# loss buffers, labels and loop bookkeeping on the device
MEMORY_OVERHEAD_BYTES = 1024


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    mode: str
    per_sample_compute_ms: float
    per_sample_energy_uj: float
    flop_per_cycle: float
    clock_mhz: float

    def __post_init__(self):
        if self.mode not in ("LPM", "HPM"):
            raise ConfigError("BAD_PROFILE", f"mode must be LPM or HPM, got {self.mode}")
        for f in ("per_sample_compute_ms", "per_sample_energy_uj", "flop_per_cycle", "clock_mhz"):
            if not getattr(self, f) > 0:
                raise ConfigError("BAD_PROFILE", f"{f} must be positive")


# Per-sample ODDA cost measured on the MCU for each DS-CNN size.
_TABLE = {
    "S": (4.94, {"LPM": (10.89, 424.0), "HPM": (6.74, 384.0)}),
    "M": (9.18, {"LPM": (24.16, 988.0), "HPM": (16.34, 974.0)}),
    "L": (11.0, {"LPM": (55.04, 2313.0), "HPM": (32.95, 2028.0)}),
}
_CLOCK_MHZ = {"LPM": 240.0, "HPM": 370.0}

PROFILES = {
    (size, mode): PlatformProfile(f"gap9-{size}-{mode}", mode, ms, uj, eff, _CLOCK_MHZ[mode])
    for size, (eff, modes) in _TABLE.items()
    for mode, (ms, uj) in modes.items()
}


def get_profile(size_tag, mode):
    try:
        return PROFILES[(size_tag, mode)]
    except KeyError:
        raise ConfigError("BAD_PROFILE", f"no calibration profile for DS-CNN {size_tag} in {mode}") from None


# --- FLOPs -------------------------------------------------------------------

def _numel(shape):
    return math.prod(shape)


def _macs(spec, in_shape, out_shape):
    c_out, oh, ow = out_shape
    kh, kw = spec.kernel
    if spec.kind == Kind.CONV2D:
        return oh * ow * c_out * spec.in_channels * kh * kw
    if spec.kind == Kind.DEPTHWISE_CONV2D:
        return oh * ow * c_out * kh * kw
    return oh * ow * c_out * spec.in_channels


def layer_forward_flops(spec, in_shape, out_shape, include_softmax=False):
    k = spec.kind
    if k in CONV_KINDS:
        return 2 * _macs(spec, in_shape, out_shape)
    if k == Kind.BATCHNORM_FOLDED:
        return 2 * _numel(out_shape)
    if k == Kind.AVGPOOL_GLOBAL:
        return _numel(in_shape) + out_shape[0]
    if k == Kind.LINEAR:
        return 2 * spec.in_channels * spec.out_channels + spec.out_channels
    if k == Kind.SOFTMAX and include_softmax:
        # max-subtract, exp, sum, divide per class
        return 4 * spec.out_channels
    return 0


def float_param_count(spec):
    """Parameters a layer trains in float (convs carry no bias; batch norm holds the shift)."""
    k = spec.kind
    if k == Kind.CONV2D:
        return spec.out_channels * spec.in_channels * spec.kernel[0] * spec.kernel[1]
    if k == Kind.DEPTHWISE_CONV2D:
        return spec.out_channels * spec.kernel[0] * spec.kernel[1]
    if k == Kind.POINTWISE_CONV2D:
        return spec.out_channels * spec.in_channels
    if k == Kind.BATCHNORM_FOLDED:
        return 2 * spec.out_channels
    if k == Kind.LINEAR:
        return spec.in_channels * spec.out_channels + spec.out_channels
    return 0


def layer_backward_flops(spec, in_shape, out_shape, is_head):
    """Gradient plus SGD-update FLOPs of one trainable-suffix layer.

    ``is_head`` marks the first float layer, whose input gradient would only
    flow into the frozen backbone and is therefore never computed.
    """
    k = spec.kind
    update = 2 * float_param_count(spec)
    if k in CONV_KINDS:
        macs = _macs(spec, in_shape, out_shape)
        return 2 * macs + (0 if is_head else 2 * macs) + update
    if k == Kind.BATCHNORM_FOLDED:
        # d_gamma (mul+add), d_beta (add), d_input (mul)
        return 4 * _numel(out_shape) + update
    if k == Kind.AVGPOOL_GLOBAL:
        return out_shape[0]
    if k == Kind.LINEAR:
        mm = 2 * spec.in_channels * spec.out_channels
        return mm + (0 if is_head else mm) + update
    return 0


def suffix_start(model, k):
    idx = [i for i, s in enumerate(model.layers) if s.kind in PARAM_KINDS]
    if not 1 <= k <= len(idx):
        raise ConfigError("BAD_DEPTH", f"adaptation depth k={k} outside [1, {len(idx)}]")
    return idx[-k]


def forward_flops_of(specs, ins, outs, include_softmax=False):
    return sum(layer_forward_flops(s, i, o, include_softmax) for s, i, o in zip(specs, ins, outs))


def count_forward_flops(model, include_softmax=False):
    return forward_flops_of(model.layers, layer_input_shapes(model), layer_output_shapes(model), include_softmax)


def count_backward_flops(model, k):
    start = suffix_start(model, k)
    ins, outs = layer_input_shapes(model), layer_output_shapes(model)
    return sum(
        layer_backward_flops(model.layers[i], ins[i], outs[i], is_head=(i == start))
        for i in range(start, len(model.layers))
    )


def total_odda_flops(model, k, s_dataset, n_epochs):
    return (count_forward_flops(model) + count_backward_flops(model, k)) * s_dataset * n_epochs


def backsolve_epochs(model, k, s_dataset, total_flops):
    """Epoch count that makes :func:`total_odda_flops` hit ``total_flops``."""
    return total_flops / ((count_forward_flops(model) + count_backward_flops(model, k)) * s_dataset)


# --- memory -----------------------------------------------------------------

@dataclass(frozen=True)
class MemoryReport:
    trainable_param_bytes: int
    gradient_bytes: int
    activation_bytes: int
    overhead_bytes: int

    @property
    def total_rw_memory_bytes(self):
        return self.trainable_param_bytes + self.gradient_bytes + self.activation_bytes + self.overhead_bytes


def memory_report(model, k, batch_size):
    """Read-write memory for one update step: float params, their gradients and suffix activations."""
    if batch_size < 1:
        raise ConfigError("BAD_BATCH", "batch_size must be >= 1")
    start = suffix_start(model, k)
    ins, outs = layer_input_shapes(model), layer_output_shapes(model)
    n_params = sum(float_param_count(s) for s in model.layers[start:])
    n_act = sum(
        _numel(ins[i]) + _numel(outs[i])
        for i in range(start, len(model.layers))
        if model.layers[i].kind != Kind.SOFTMAX
    )
    return MemoryReport(
        n_params * FLOAT_BYTES, n_params * FLOAT_BYTES, n_act * batch_size * FLOAT_BYTES, MEMORY_OVERHEAD_BYTES
    )


# --- latency / energy ------------------------------------------------------------

def estimate_odda(profile, s_dataset, s_batch, n_epochs):
    """(seconds, joules) for an adaptation run.

    The per-sample calibration already covers inference plus backprop, so
    cost is linear in samples processed; batch size only changes the number
    of update steps.
    """
    if s_dataset < 0 or n_epochs < 0 or s_batch < 1:
        raise ConfigError("BAD_RUN", "dataset size and epochs must be >= 0, batch size >= 1")
    samples = s_dataset * n_epochs
    return profile.per_sample_compute_ms * samples / 1000.0, profile.per_sample_energy_uj * samples / 1e6


def update_steps(s_dataset, s_batch, n_epochs):
    return math.ceil(s_dataset / s_batch) * n_epochs


# --- reports -----------------------------------------------------------------

@dataclass
class CostReport:
    forward_flops: int
    backward_flops: int
    total_odda_flops: int
    trainable_param_bytes: int
    gradient_bytes: int
    activation_bytes: int
    total_rw_memory_bytes: int
    storage_bytes: int
    t_odda_seconds: float
    energy_joules: float
    steps: tuple

    def to_json(self):
        d = asdict(self)
        d["steps"] = list(self.steps)
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["steps"] = tuple(d["steps"])
        return cls(**d)


def frozen_param_bytes(model, k):
    start = suffix_start(model, k)
    return param_bytes(model) - sum(
        _deployed(s) for s in model.layers[start:]
    )


def _deployed(spec):
    from .model import layer_param_count

    return layer_param_count(spec)


def cost_report(model, k, s_dataset, s_batch, n_epochs, profile):
    """Full accounting for adapting ``model`` at depth ``k``.

    ``storage_bytes`` is the read-only footprint: the stored one-second
    utterances plus the int8 frozen backbone.
    """
    mem = memory_report(model, k, s_batch)
    fwd = count_forward_flops(model)
    bwd = count_backward_flops(model, k)
    t, e = estimate_odda(profile, s_dataset, s_batch, n_epochs)
    storage = s_dataset * UTTERANCE_SAMPLES * BYTES_PER_SAMPLE + frozen_param_bytes(model, k)
    return CostReport(
        forward_flops=fwd,
        backward_flops=bwd,
        total_odda_flops=(fwd + bwd) * s_dataset * n_epochs,
        trainable_param_bytes=mem.trainable_param_bytes,
        gradient_bytes=mem.gradient_bytes,
        activation_bytes=mem.activation_bytes,
        total_rw_memory_bytes=mem.total_rw_memory_bytes,
        storage_bytes=storage,
        t_odda_seconds=t,
        energy_joules=e,
        steps=(s_dataset, s_batch, n_epochs),
    )


CSV_FIELDS = [f.name for f in fields(CostReport) if f.name != "steps"] + ["s_dataset", "s_batch", "n_epochs"]


def reports_to_csv(rows, extra=None):
    """CSV text with one row per report; ``extra`` is a list of dicts of leading columns."""
    extra = extra or [{} for _ in rows]
    lead = list(extra[0]) if extra else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(lead + CSV_FIELDS)
    for x, r in zip(extra, rows):
        d = asdict(r)
        s_dataset, s_batch, n_epochs = d.pop("steps")
        w.writerow([x[c] for c in lead] + [d[c] for c in CSV_FIELDS[:-3]] + [s_dataset, s_batch, n_epochs])
    return buf.getvalue()
