"""Noise mixing at a target SNR and MFCC feature extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.fft import dct

from .audio_io import SAMPLE_RATE, UTTERANCE_SAMPLES, AudioClip
from .errors import ConfigError, DataError

HALF_EMULATED = "HALF_EMULATED"
SINGLE = "SINGLE"
LOG_FLOOR = 1e-6


@dataclass
class MixConfig:
    snr_db: float = 0.0
    source_noises: list = field(default_factory=list)
    # None means "clean is as likely as any single noise"
    clean_probability: Optional[float] = None

    def __post_init__(self):
        p = self.clean_probability
        if p is not None and not 0.0 <= p <= 1.0:
            raise ConfigError("BAD_PROBABILITY", f"clean_probability {p} outside [0, 1]")

    @property
    def p_clean(self):
        if self.clean_probability is not None:
            return self.clean_probability
        return 1.0 / (len(self.source_noises) + 1)


@dataclass(frozen=True)
class MfccConfig:
    frame_len: int = 640
    frame_stride: int = 320
    fft_size: int = 1024
    mel_filters: int = 40
    num_coeffs: int = 10
    emulate_half_precision: bool = True
    f_min: float = 20.0
    f_max: float = 8000.0

    def __post_init__(self):
        if self.frame_len > self.fft_size:
            raise ConfigError("BAD_MFCC_CONFIG", "frame_len must not exceed fft_size")
        if self.num_coeffs > self.mel_filters:
            raise ConfigError("BAD_MFCC_CONFIG", "num_coeffs must not exceed mel_filters")
        if self.frame_stride < 1 or self.frame_len < 1:
            raise ConfigError("BAD_MFCC_CONFIG", "frame sizes must be positive")

    @property
    def num_frames(self):
        return (UTTERANCE_SAMPLES - self.frame_len) // self.frame_stride + 1

    @property
    def shape(self):
        return (self.num_frames, self.num_coeffs)


@dataclass
class MfccTensor:
    values: np.ndarray
    precision_tag: str = SINGLE

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise DataError("NONFINITE", "MFCC values must be finite")


# --- mixing -------------------------------------------------------------

def _power(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x)) if x.size else 0.0


def noise_segment(noise, length, offset):
    """``length`` noise samples starting at ``offset``, wrapping around the recording."""
    if len(noise) < length:
        raise DataError("NOISE_TOO_SHORT", f"noise has {len(noise)} samples, need {length}")
    idx = (int(offset) + np.arange(length)) % len(noise)
    return noise.samples[idx]


def snr_gain(clean, segment, snr_db):
    """Gain g such that 10*log10(P_clean / P(g*segment)) == snr_db (None for the no-noise branch)."""
    if math.isinf(snr_db) and snr_db > 0:
        return None
    p_noise = _power(segment)
    if p_noise == 0.0:
        return None
    p_clean = _power(clean)
    if p_clean == 0.0:
        raise DataError("SILENT_CLEAN", "clean clip has zero power; SNR is undefined")
    return math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(clean, noise, snr_db, offset=0):
    segment = noise_segment(noise, len(clean), offset)
    g = snr_gain(clean.samples, segment, snr_db)
    if g is None:
        return clean
    mixed = clean.samples.astype(np.float64) + g * segment.astype(np.float64)
    samples = np.clip(np.round(mixed), -32768, 32767).astype(np.int16)
    return AudioClip(samples, clean.sample_rate, clean.label, clean.source_id)


def augment_for_training(clean, cfg, rng):
    if not cfg.source_noises:
        raise ConfigError("NO_SOURCE_NOISE", "augmentation needs at least one source noise")
    if rng.random() < cfg.p_clean:
        return clean
    profile = cfg.source_noises[rng.integers(len(cfg.source_noises))]
    offset = rng.integers(len(profile.clip))
    return mix_at_snr(clean, profile.clip, cfg.snr_db, offset)


# --- MFCC ---------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_filters, fft_size, sample_rate=SAMPLE_RATE, f_min=20.0, f_max=8000.0):
    """Triangular filters (n_filters x fft_size//2+1), equally spaced on the mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def hann_window(n):
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def frame_signal(x, frame_len, stride):
    n_frames = (len(x) - frame_len) // stride + 1
    idx = np.arange(frame_len)[None, :] + stride * np.arange(n_frames)[:, None]
    return x[idx]


def magnitude_spectrum(frames, fft_size):
    """|FFT| of zero-padded real frames, non-negative bins only."""
    return np.abs(np.fft.rfft(frames, n=fft_size, axis=-1))


def to_half_and_back(x):
    return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def compute_mfcc(clip, cfg=MfccConfig()):
    if len(clip) != UTTERANCE_SAMPLES:
        raise DataError("WRONG_LENGTH", f"{clip.source_id}: {len(clip)} samples, expected {UTTERANCE_SAMPLES}")
    frames = frame_signal(clip.as_float(), cfg.frame_len, cfg.frame_stride)
    frames = frames - frames.mean(axis=1, keepdims=True)
    frames = frames * hann_window(cfg.frame_len)
    spec = magnitude_spectrum(frames, cfg.fft_size)
    fb = mel_filterbank(cfg.mel_filters, cfg.fft_size, SAMPLE_RATE, cfg.f_min, cfg.f_max)
    log_mel = np.log(spec @ fb.T + LOG_FLOOR)
    coeffs = dct(log_mel, type=2, norm="ortho", axis=-1)[:, : cfg.num_coeffs].astype(np.float32)
    if cfg.emulate_half_precision:
        return MfccTensor(to_half_and_back(coeffs), HALF_EMULATED)
    return MfccTensor(coeffs, SINGLE)


def mfcc_batch(clips, cfg=MfccConfig()):
    """Stack clips into a (batch, 1, frames, coeffs) float32 network input."""
    return np.stack([compute_mfcc(c, cfg).values for c in clips])[:, None, :, :]
