"""Audio clips, WAV I/O, dataset manifests and synthetic desk-scale data.

Only 16 kHz / 16-bit / mono PCM is accepted; there is no resampling path.
"""

from __future__ import annotations

import csv
import hashlib
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

SAMPLE_RATE = 16000
UTTERANCE_SAMPLES = SAMPLE_RATE
BYTES_PER_SAMPLE = 2
VALID_TASK_SIZES = (6, 12, 35)
SPLITS = ("train", "validation", "test")

SOURCE = "SOURCE"
TARGET = "TARGET"


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    label: Optional[int] = None
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.dtype != np.int16:
            if samples.size and (samples.min() < -32768 or samples.max() > 32767):
                raise DataError("UNSUPPORTED_FORMAT", f"{self.source_id}: samples outside int16 range")
            samples = samples.astype(np.int16)
        self.samples = samples.reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise DataError("UNSUPPORTED_FORMAT", f"sample rate {self.sample_rate} != {SAMPLE_RATE}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def is_utterance(self):
        return self.label is not None

    def as_float(self):
        """Samples scaled to [-1, 1)."""
        return self.samples.astype(np.float64) / 32768.0


@dataclass
class NoiseProfile:
    clip: AudioClip
    role: str = SOURCE

    def __post_init__(self):
        if self.role not in (SOURCE, TARGET):
            raise ConfigError("BAD_ROLE", f"noise role must be SOURCE or TARGET, got {self.role!r}")
        if self.clip.label is not None:
            raise ConfigError("BAD_ROLE", "noise clips carry no label")

    @property
    def name(self):
        return self.clip.source_id


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list
    class_names: list
    task_size: int
    root: Optional[Path] = None
    # in-memory clips keyed by entry path; filled by synth_dataset, bypasses disk
    clips: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task_size not in VALID_TASK_SIZES:
            raise DataError("INVALID_TASK_SIZE", f"task_size {self.task_size} not in {VALID_TASK_SIZES}")
        if len(self.class_names) != self.task_size:
            raise DataError("BAD_MANIFEST", f"{len(self.class_names)} class names for task_size {self.task_size}")
        seen = {}
        for e in self.entries:
            if not 0 <= e.label < self.task_size:
                raise DataError("BAD_MANIFEST", f"label {e.label} out of range for {e.path}")
            if e.split not in SPLITS:
                raise DataError("BAD_MANIFEST", f"unknown split {e.split!r} for {e.path}")
            if seen.setdefault(e.path, e.split) != e.split:
                raise DataError("BAD_MANIFEST", f"{e.path} appears in more than one split")

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def subset(self, entries):
        return DatasetManifest(list(entries), list(self.class_names), self.task_size, self.root, self.clips)

    def get_clip(self, entry):
        clip = self.clips.get(entry.path)
        if clip is None:
            if self.root is None:
                raise DataError("MISSING_FILE", f"no root directory to resolve {entry.path}")
            clip = load_wav(self.root / entry.path)
        return AudioClip(clip.samples, label=entry.label, source_id=entry.path)


def load_wav(path):
    """Read a 16 kHz, 16-bit, mono PCM WAV file."""
    path = Path(path)
    if not path.exists():
        raise DataError("MISSING_FILE", f"{path} does not exist")
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1 or width != BYTES_PER_SAMPLE or rate != SAMPLE_RATE:
                raise DataError(
                    "UNSUPPORTED_FORMAT",
                    f"{path}: {channels} ch, {8 * width}-bit, {rate} Hz (need mono 16-bit 16000 Hz)",
                )
            raw = w.readframes(n)
    except wave.Error as exc:
        code = "UNSUPPORTED_FORMAT" if "unknown format" in str(exc) else "MALFORMED_CONTAINER"
        raise DataError(code, f"{path}: {exc}") from exc
    except EOFError as exc:
        raise DataError("MALFORMED_CONTAINER", f"{path}: truncated header") from exc
    if len(raw) != n * BYTES_PER_SAMPLE:
        raise DataError("MALFORMED_CONTAINER", f"{path}: data chunk shorter than declared")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int16)
    return AudioClip(samples, SAMPLE_RATE, None, path.stem)


def write_wav(path, clip):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(BYTES_PER_SAMPLE)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(clip.samples.astype("<i2").tobytes())


def storage_bytes(clip):
    return len(clip) * BYTES_PER_SAMPLE


def dataset_storage_bytes(manifest):
    # every stored keyword utterance is exactly one second long
    return len(manifest.entries) * UTTERANCE_SAMPLES * BYTES_PER_SAMPLE


def write_manifest(manifest, csv_path, classes_path=None):
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for e in manifest.entries:
            writer.writerow([e.path, e.label, e.split])
    classes_path = Path(classes_path) if classes_path else csv_path.with_name("classes.txt")
    classes_path.write_text("".join(f"{c}\n" for c in manifest.class_names), encoding="utf-8")


def read_manifest(csv_path, classes_path=None):
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError("MISSING_FILE", f"manifest {csv_path} does not exist")
    classes_path = Path(classes_path) if classes_path else csv_path.with_name("classes.txt")
    if not classes_path.exists():
        raise DataError("MISSING_FILE", f"class list {classes_path} does not exist")
    class_names = [ln for ln in classes_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["path", "label", "split"]:
            raise DataError("BAD_MANIFEST", f"{csv_path}: header must be path,label,split")
        entries = [ManifestEntry(r["path"], int(r["label"]), r["split"]) for r in reader]
    return DatasetManifest(entries, class_names, len(class_names), root=csv_path.parent)


def write_dataset(root, manifest):
    """Write in-memory clips as WAV files plus manifest.csv and classes.txt under ``root``."""
    root = Path(root)
    for e in manifest.entries:
        write_wav(root / e.path, manifest.get_clip(e))
    write_manifest(manifest, root / "manifest.csv")
    manifest.root = root
    return root / "manifest.csv"


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- synthetic data -------------------------------------------------------

_CLASS_TEMPLATE_SEED = 0x5EED


def _class_template(label):
    """Fixed multi-tone chirp recipe for a class; independent of the dataset seed."""
    rng = np.random.default_rng([_CLASS_TEMPLATE_SEED, label])
    n_tones = 3
    f_start = rng.uniform(250.0, 3500.0, n_tones)
    f_end = f_start * rng.uniform(0.5, 2.0, n_tones)
    amps = rng.uniform(0.4, 1.0, n_tones)
    onset = rng.uniform(0.15, 0.35, n_tones)
    duration = rng.uniform(0.3, 0.5, n_tones)
    return f_start, np.clip(f_end, 150.0, 6000.0), amps, onset, duration


def _chirp(t, f0, f1, start, dur, phase):
    tau = np.clip(t - start, 0.0, dur)
    inside = (t >= start) & (t < start + dur)
    inst_phase = 2 * np.pi * (f0 * tau + 0.5 * (f1 - f0) / dur * tau**2) + phase
    env = np.where(inside, np.sin(np.pi * tau / dur) ** 2, 0.0)
    return env * np.sin(inst_phase)


def synth_utterance(label, rng, peak=0.5):
    f_start, f_end, amps, onset, duration = _class_template(label)
    t = np.arange(UTTERANCE_SAMPLES) / SAMPLE_RATE
    shift = rng.uniform(-0.1, 0.1)
    warp = rng.uniform(0.97, 1.03)
    x = np.zeros_like(t)
    for f0, f1, a, on, dur in zip(f_start, f_end, amps, onset, duration):
        gain = a * rng.uniform(0.8, 1.2)
        x += gain * _chirp(t, f0 * warp, f1 * warp, on + shift, dur, rng.uniform(0, 2 * np.pi))
    x += 0.01 * rng.standard_normal(t.shape)
    x *= peak * rng.uniform(0.6, 1.0) / max(np.max(np.abs(x)), 1e-9)
    return np.round(x * 32767).astype(np.int16)


def synth_dataset(task_size, per_class, seed, split_fractions=(0.8, 0.1, 0.1)):
    """Deterministic class-separable chirp dataset held in memory.

    Each class is a fixed three-tone chirp template; every clip jitters
    amplitude, phase, pitch and onset. Clips land in ``manifest.clips``;
    use :func:`write_dataset` to put them on disk.
    """
    if task_size not in VALID_TASK_SIZES:
        raise ConfigError("INVALID_TASK_SIZE", f"task_size {task_size} not in {VALID_TASK_SIZES}")
    if per_class < 1:
        raise ConfigError("INVALID_TASK_SIZE", "per_class must be >= 1")
    n_val = int(round(per_class * split_fractions[1]))
    n_test = int(round(per_class * split_fractions[2]))
    n_train = per_class - n_val - n_test
    rng = np.random.default_rng(seed)
    entries, clips = [], {}
    class_names = [f"kw{c:02d}" for c in range(task_size)]
    for c in range(task_size):
        for i in range(per_class):
            split = "train" if i < n_train else "validation" if i < n_train + n_val else "test"
            path = f"{class_names[c]}/s{seed}_{i:05d}.wav"
            clips[path] = AudioClip(synth_utterance(c, rng), label=c, source_id=path)
            entries.append(ManifestEntry(path, c, split))
    return DatasetManifest(entries, class_names, task_size, clips=clips)


NOISE_KINDS = ("white", "pink", "brown", "hum", "machine", "babble", "silence")


def synth_noise(kind, seconds=4.0, seed=0, rms=0.1):
    """Synthetic stand-ins for recorded environmental noise.

    ``babble`` overlaps random chirps from the same band as the keyword
    templates, so it is the hardest interferer (speech-like, non-stationary).
    """
    n = int(round(seconds * SAMPLE_RATE))
    if n < UTTERANCE_SAMPLES:
        raise ConfigError("NOISE_TOO_SHORT", "noise recordings must last at least one second")
    rng = np.random.default_rng([hash_name(kind), seed])
    t = np.arange(n) / SAMPLE_RATE
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
        f[0] = f[1]
        spec /= np.sqrt(f) if kind == "pink" else f
        x = np.fft.irfft(spec, n)
    elif kind == "hum":
        x = sum(np.sin(2 * np.pi * 50 * h * t + rng.uniform(0, 2 * np.pi)) / h for h in range(1, 12))
        x = x + 0.05 * rng.standard_normal(n)
    elif kind == "machine":
        carrier = np.sin(2 * np.pi * 180 * t) + 0.5 * np.sin(2 * np.pi * 1230 * t)
        x = carrier * (1 + 0.8 * np.sin(2 * np.pi * 6 * t)) + 0.2 * rng.standard_normal(n)
    elif kind == "babble":
        x = np.zeros(n)
        for _ in range(int(seconds * 12)):
            f0 = rng.uniform(250.0, 3500.0)
            f1 = np.clip(f0 * rng.uniform(0.5, 2.0), 150.0, 6000.0)
            dur = rng.uniform(0.1, 0.4)
            start = rng.uniform(0, seconds - dur)
            x += rng.uniform(0.3, 1.0) * _chirp(t, f0, f1, start, dur, rng.uniform(0, 2 * np.pi))
    elif kind == "silence":
        x = np.zeros(n)
    else:
        raise ConfigError("UNKNOWN_NOISE", f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    power = np.sqrt(np.mean(x**2))
    if power > 0:
        x = x * (rms / power)
    samples = np.clip(np.round(x * 32767), -32768, 32767).astype(np.int16)
    return AudioClip(samples, label=None, source_id=kind)


def hash_name(name):
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")
