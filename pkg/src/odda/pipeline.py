"""NA-KWS pretraining, freezing, on-device adaptation, evaluation and subsampling."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .audio_io import TARGET, DatasetManifest, NoiseProfile
from .dsp import MfccConfig, MixConfig, augment_for_training, compute_mfcc, mix_at_snr
from .errors import ConfigError, DataError
from .model import build_model, freeze_and_quantize_model, predict
from .train import TrainConfig, make_batches, train_epoch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    size_tag: str = "S"
    num_classes: int = 12


@dataclass
class EvalReport:
    top1_accuracy: float
    per_class_accuracy: list
    per_class_count: list
    condition: str
    n_samples: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2) + "\n"

    def per_class_csv(self, class_names=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "name", "count", "accuracy"])
        for c, (acc, n) in enumerate(zip(self.per_class_accuracy, self.per_class_count)):
            w.writerow([c, class_names[c] if class_names else "", n, f"{acc:.4f}"])
        return buf.getvalue()


@dataclass
class AdaptationRun:
    model: object
    target_noise: NoiseProfile
    stored_utterances: DatasetManifest
    train_cfg: TrainConfig
    snr_db: float = 0.0
    mfcc_cfg: MfccConfig = field(default_factory=MfccConfig)
    # optional held-out target-noise set scored after every epoch
    eval_manifest: Optional[DatasetManifest] = None
    eval_split: str = "test"

    def __post_init__(self):
        if self.target_noise.role != TARGET:
            raise ConfigError("BAD_ROLE", "adaptation needs the TARGET noise profile")
        bad = [e.path for e in self.stored_utterances.entries if e.split != "train"]
        if bad:
            raise ConfigError("NOT_TRAIN_SPLIT", f"stored utterances must come from the training split: {bad[:3]}")


# --- features -----------------------------------------------------------------

def clips_for(manifest, entries):
    return [manifest.get_clip(e) for e in entries]


def features(clips, mfcc_cfg):
    return np.stack([compute_mfcc(c, mfcc_cfg).values for c in clips])[:, None, :, :]


def path_offset(path, noise_len):
    """Deterministic noise offset for a clip, so repeated evaluations mix identically."""
    return zlib.crc32(path.encode("utf-8")) % noise_len


def eval_inputs(manifest, split, noise, snr_db, mfcc_cfg):
    entries = manifest.split(split)
    if not entries:
        raise DataError("EMPTY_SPLIT", f"split {split!r} is empty")
    noises = noise if isinstance(noise, (list, tuple)) else [noise] if noise is not None else []
    mixed = []
    for e in entries:
        clip = manifest.get_clip(e)
        if noises:
            h = zlib.crc32(e.path.encode("utf-8"))
            prof = noises[(h >> 16) % len(noises)]
            clip = mix_at_snr(clip, prof.clip, snr_db, path_offset(e.path, len(prof.clip)))
        mixed.append(clip)
    return features(mixed, mfcc_cfg), np.array([e.label for e in entries]), noises


def _condition(noises, snr_db):
    if not noises:
        return "clean"
    return "+".join(n.name for n in noises) + f"@{snr_db:g}dB"


def score(pred, labels, num_classes, condition):
    per_acc, per_n = [], []
    for c in range(num_classes):
        m = labels == c
        per_n.append(int(m.sum()))
        per_acc.append(float(100.0 * np.mean(pred[m] == c)) if m.any() else 0.0)
    top1 = float(100.0 * np.mean(pred == labels))
    return EvalReport(top1, per_acc, per_n, condition, int(len(labels)))


def evaluate(model, manifest, split="test", noise=None, snr_db=0.0, mfcc_cfg=MfccConfig(), inputs=None):
    """Top-1 and per-class accuracy on ``split`` mixed with ``noise`` (None for clean).

    ``noise`` may be a list of profiles; each clip then gets one of them,
    picked from a hash of its path. ``inputs`` reuses precomputed
    ``eval_inputs`` output.
    """
    x, y, noises = inputs if inputs is not None else eval_inputs(manifest, split, noise, snr_db, mfcc_cfg)
    return score(predict(model, x), y, model.num_classes, _condition(noises, snr_db))


# --- subsampling --------------------------------------------------------------

def subsample(manifest, per_class=None, fraction=None, seed=0, split="train", classes=None):
    """Stratified sample of ``split``: ``per_class`` clips per class, or ``fraction`` of each class.

    ``classes`` restricts which labels get stored (default: all).
    """
    if (per_class is None) == (fraction is None):
        raise ConfigError("BAD_SUBSAMPLE", "give exactly one of per_class or fraction")
    if fraction is not None and not 0 < fraction <= 1:
        raise ConfigError("BAD_SUBSAMPLE", f"fraction {fraction} outside (0, 1]")
    if per_class is not None and per_class < 1:
        raise ConfigError("BAD_SUBSAMPLE", "per_class must be >= 1")
    entries = manifest.split(split)
    labels = sorted(set(classes)) if classes is not None else range(manifest.task_size)
    rng = np.random.default_rng(seed)
    keep = set()
    for c in labels:
        pool = [e for e in entries if e.label == c]
        n = per_class if per_class is not None else int(round(fraction * len(pool)))
        if n > len(pool):
            raise DataError("CLASS_UNDERFLOW", f"class {c} has {len(pool)} {split} clips, need {n}")
        if n == len(pool):
            keep.update(e.path for e in pool)
        else:
            keep.update(pool[i].path for i in rng.choice(len(pool), size=n, replace=False))
    return manifest.subset(e for e in entries if e.path in keep)


# --- NA-KWS pretraining --------------------------------------------------------

def check_no_leak(sources, target_name):
    names = {p.name for p in sources}
    if target_name is not None and target_name in names:
        raise ConfigError("TARGET_LEAK", f"target noise {target_name!r} is among the source noises")
    if any(p.role == TARGET for p in sources):
        raise ConfigError("TARGET_LEAK", "a TARGET-role profile is in the source set")


def pretrain_nakws(
    manifest,
    mix_cfg,
    model_cfg,
    train_cfg,
    target_name=None,
    mfcc_cfg=MfccConfig(),
    arch=None,
    on_epoch=None,
):
    """Train an all-float model on noise-augmented clean utterances.

    Every epoch re-draws the augmentation of every clip. Returns
    ``(best_model, trace)`` where the model is the best-validation epoch and
    ``trace`` rows are ``(epoch, loss, val_accuracy, update_steps)``.
    """
    check_no_leak(mix_cfg.source_noises, target_name)
    model = build_model(model_cfg.size_tag, model_cfg.num_classes, seed=train_cfg.seed, arch=arch)
    train = manifest.split("train")
    if not train:
        raise DataError("EMPTY_SPLIT", "no training clips")
    clean = clips_for(manifest, train)
    y = np.array([e.label for e in train])
    val_inputs = None
    if manifest.split("validation"):
        val_inputs = eval_inputs(manifest, "validation", mix_cfg.source_noises, mix_cfg.snr_db, mfcc_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    best, best_acc, trace = model.clone(), -1.0, []
    for epoch in range(1, train_cfg.epochs + 1):
        x = features([augment_for_training(c, mix_cfg, rng) for c in clean], mfcc_cfg)
        loss, steps = train_epoch(model, make_batches(x, y, train_cfg.batch_size, rng), train_cfg, bn_training=True)
        acc = evaluate(model, manifest, inputs=val_inputs).top1_accuracy if val_inputs else float("nan")
        trace.append((epoch, loss, acc, steps))
        log.info("pretrain epoch %d loss %.4f val %.2f%%", epoch, loss, acc)
        if on_epoch:
            on_epoch(epoch, loss, acc)
        if val_inputs is None or acc > best_acc:
            best, best_acc = model.clone(), acc
    return best, trace


def freeze_and_quantize(model, calibration_clips, k, mfcc_cfg=MfccConfig()):
    """Fold batch norm, calibrate scales on ``calibration_clips`` and keep the last ``k`` layers float."""
    x = features(calibration_clips, mfcc_cfg)
    return freeze_and_quantize_model(model, x, k)


# --- ODDA -------------------------------------------------------------------------

def adapt(run, on_epoch=None):
    """Fine-tune the float suffix on stored utterances mixed with the target noise.

    Noise offsets are re-drawn every epoch. Suffix batch-norm layers stay in
    inference (affine) mode. Returns ``(model, trace)``; trace rows are
    ``(epoch, loss, accuracy, update_steps)`` with accuracy NaN unless an
    eval set is given.
    """
    entries = run.stored_utterances.entries
    if not entries:
        raise DataError("EMPTY_STORE", "no stored utterances to adapt on")
    cfg = run.train_cfg
    if cfg.adaptation_depth_k != run.model.adaptation_depth_k:
        raise ConfigError("BAD_DEPTH", f"train config k={cfg.adaptation_depth_k} but model k={run.model.adaptation_depth_k}")
    model = run.model.clone()
    clean = clips_for(run.stored_utterances, entries)
    y = np.array([e.label for e in entries])
    noise = run.target_noise.clip
    eval_in = None
    if run.eval_manifest is not None:
        eval_in = eval_inputs(run.eval_manifest, run.eval_split, run.target_noise, run.snr_db, run.mfcc_cfg)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        offsets = rng.integers(len(noise), size=len(clean))
        mixed = [mix_at_snr(c, noise, run.snr_db, o) for c, o in zip(clean, offsets)]
        x = features(mixed, run.mfcc_cfg)
        loss, steps = train_epoch(model, make_batches(x, y, cfg.batch_size, rng), cfg)
        acc = evaluate(model, run.eval_manifest, inputs=eval_in).top1_accuracy if eval_in else float("nan")
        trace.append((epoch, loss, acc, steps))
        log.debug("adapt epoch %d loss %.4f acc %s", epoch, loss, acc)
        if on_epoch:
            on_epoch(epoch, loss, acc)
    return model, trace


def total_adapt_steps(s_dataset, s_batch, n_epochs):
    return math.ceil(s_dataset / s_batch) * n_epochs


def trace_csv(trace, acc_name="val_accuracy"):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", acc_name])
    for epoch, loss, acc, _ in trace:
        w.writerow([epoch, f"{loss:.6f}", f"{acc:.4f}"])
    return buf.getvalue()
