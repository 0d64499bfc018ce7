"""Per-tensor symmetric int8 quantization.

Float tensors are plain ``float32`` numpy arrays; :class:`QuantTensor` is the
frozen-backbone counterpart. Codes live in [-127, 127] so negation never
overflows and ``quantize(-t) == -quantize(t)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

QMAX = 127
_DIMS = struct.Struct("<4I")
_SCALE = struct.Struct("<d")


@dataclass(frozen=True)
class QuantTensor:
    q_values: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError("NONPOSITIVE_SCALE", f"scale must be > 0, got {self.scale}")
        q = np.asarray(self.q_values)
        if q.dtype != np.int8:
            raise DataError("BAD_QUANT", f"q_values must be int8, got {q.dtype}")
        if q.size and (q.min() < -QMAX or q.max() > QMAX):
            raise DataError("BAD_QUANT", "q_values must lie in [-127, 127]")

    @property
    def shape(self):
        return self.q_values.shape

    @property
    def nbytes(self):
        return self.q_values.size

    zero_point = 0


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(t, scale):
    if not scale > 0:
        raise ConfigError("NONPOSITIVE_SCALE", f"scale must be > 0, got {scale}")
    q = np.clip(round_half_away(np.asarray(t, dtype=np.float64) / scale), -QMAX, QMAX)
    return QuantTensor(q.astype(np.int8), float(scale))


def dequantize(q):
    return (q.q_values.astype(np.float64) * q.scale).astype(np.float32)


def calibrate_scale(samples):
    """max |v| over all sample tensors, divided by 127."""
    if not len(samples):
        raise DataError("ALL_ZERO_INPUT", "no calibration samples")
    peak = max(float(np.max(np.abs(s))) if np.size(s) else 0.0 for s in samples)
    if peak == 0.0:
        raise DataError("ALL_ZERO_INPUT", "calibration samples are all zero")
    return peak / QMAX


def requantize(acc, multiplier):
    """Scale an integer accumulator by ``multiplier`` and saturate to int8 codes."""
    return np.clip(round_half_away(acc * multiplier), -QMAX, QMAX)


# --- serialization ---------------------------------------------------------

def pack_dims(shape):
    if len(shape) > 4 or any(d == 0 for d in shape):
        raise DataError("BAD_SHAPE", f"cannot serialize shape {shape}")
    return _DIMS.pack(*(tuple(shape) + (0,) * (4 - len(shape))))


def unpack_dims(buf, pos):
    if pos + _DIMS.size > len(buf):
        raise DataError("TRUNCATED", "checkpoint ends inside a tensor header")
    dims = _DIMS.unpack_from(buf, pos)
    shape = []
    for d in dims:
        if d == 0:
            break
        shape.append(d)
    return tuple(shape), pos + _DIMS.size


def serialize_quant(q):
    return pack_dims(q.shape) + _SCALE.pack(q.scale) + q.q_values.tobytes()


def deserialize_quant(buf, pos=0):
    shape, pos = unpack_dims(buf, pos)
    if pos + _SCALE.size > len(buf):
        raise DataError("TRUNCATED", "checkpoint ends inside a quant scale")
    (scale,) = _SCALE.unpack_from(buf, pos)
    pos += _SCALE.size
    n = int(np.prod(shape))
    if pos + n > len(buf):
        raise DataError("TRUNCATED", "checkpoint ends inside quantized values")
    q = np.frombuffer(buf, dtype=np.int8, count=n, offset=pos).reshape(shape).copy()
    return QuantTensor(q, scale), pos + n


def serialize_float(t):
    t = np.asarray(t, dtype=np.float32)
    return pack_dims(t.shape) + t.astype("<f4").tobytes()


def deserialize_float(buf, pos=0):
    shape, pos = unpack_dims(buf, pos)
    n = int(np.prod(shape))
    if pos + 4 * n > len(buf):
        raise DataError("TRUNCATED", "checkpoint ends inside float values")
    t = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
    return t, pos + 4 * n
