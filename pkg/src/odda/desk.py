"""Desk-scale ODDA experiment on the synthetic chirp task.

Shared by the acceptance suite and ``scripts/desk_experiment.py``: pretrain
a noise-aware model on source noises, freeze it, then adapt to a held-out
target noise and compare against the frozen baseline.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .audio_io import SOURCE, TARGET, NoiseProfile, synth_dataset, synth_noise
from .dsp import MfccConfig, MixConfig
from .model import predict
from .pipeline import (
    AdaptationRun,
    ModelConfig,
    adapt,
    clips_for,
    eval_inputs,
    evaluate,
    freeze_and_quantize,
    pretrain_nakws,
    subsample,
)
from .train import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    num_classes: int = 12
    per_class: int = 150
    data_seed: int = 1
    sources: tuple = ("white", "pink", "hum", "machine")
    target: str = "babble"
    snr_db: float = 0.0
    noise_seconds: float = 8.0
    size_tag: str = "S"
    pretrain_lr: float = 0.1
    pretrain_batch: int = 32
    pretrain_epochs: int = 15
    calibration_clips: int = 200
    # independent eval set: 12 x 42 = 504 clips, all in the test split
    eval_per_class: int = 42
    eval_seed: int = 99
    adapt_lr: float = 0.01
    # deeper suffixes diverge at 0.01 on some seeds (BN affine in the loop)
    deep_adapt_lr: float = 0.003
    adapt_batch: int = 2
    adapt_epochs: int = 21
    adapt_seeds: tuple = (0, 1, 2, 3, 4)


@dataclass
class Desk:
    cfg: DeskConfig
    manifest: object
    eval_manifest: object
    sources: list
    target: NoiseProfile
    float_model: object
    trace: list
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    _frozen: dict = field(default_factory=dict)
    _inputs: dict = field(default_factory=dict)

    def frozen(self, k=1):
        if k not in self._frozen:
            train = self.manifest.split("train")
            step = max(1, len(train) // self.cfg.calibration_clips)
            calib = clips_for(self.manifest, train[::step][: self.cfg.calibration_clips])
            self._frozen[k] = freeze_and_quantize(self.float_model, calib, k, self.mfcc)
        return self._frozen[k]

    def inputs(self, noise):
        """Cached eval-set features for ``noise`` (a profile, a list, or None)."""
        key = "clean" if noise is None else noise.name if isinstance(noise, NoiseProfile) else "sources"
        if key not in self._inputs:
            self._inputs[key] = eval_inputs(self.eval_manifest, "test", noise, self.cfg.snr_db, self.mfcc)
        return self._inputs[key]

    def accuracy(self, model, noise):
        return evaluate(model, self.eval_manifest, inputs=self.inputs(noise)).top1_accuracy

    def agreement(self, a, b, noise=None):
        x = self.inputs(noise)[0]
        return float(np.mean(predict(a, x) == predict(b, x)))

    def adapt_once(self, k=1, per_class=10, seed=0, target=None, lr=None):
        c = self.cfg
        if lr is None:
            lr = c.adapt_lr if k == 1 else c.deep_adapt_lr
        store = subsample(self.manifest, per_class=per_class, seed=seed)
        run = AdaptationRun(
            self.frozen(k),
            target or self.target,
            store,
            TrainConfig(lr, c.adapt_batch, c.adapt_epochs, k, seed),
            c.snr_db,
            self.mfcc,
        )
        model, trace = adapt(run)
        return model, trace

    def adapted_accuracies(self, k=1, per_class=10, target=None, seeds=None):
        target = target or self.target
        accs = []
        for s in seeds if seeds is not None else self.cfg.adapt_seeds:
            t0 = time.time()
            model, _ = self.adapt_once(k, per_class, s, target)
            accs.append(self.accuracy(model, target))
            log.info("adapt k=%d n=%d seed=%d -> %.2f%% (%.1fs)", k, per_class, s, accs[-1], time.time() - t0)
        return accs


def noise_profiles(cfg):
    sources = [NoiseProfile(synth_noise(n, cfg.noise_seconds, seed=0), SOURCE) for n in cfg.sources]
    target = NoiseProfile(synth_noise(cfg.target, cfg.noise_seconds, seed=0), TARGET)
    return sources, target


def build_desk(cfg=DeskConfig()):
    manifest = synth_dataset(cfg.num_classes, cfg.per_class, cfg.data_seed)
    eval_manifest = synth_dataset(cfg.num_classes, cfg.eval_per_class, cfg.eval_seed, split_fractions=(0.0, 0.0, 1.0))
    sources, target = noise_profiles(cfg)
    train_cfg = TrainConfig(cfg.pretrain_lr, cfg.pretrain_batch, cfg.pretrain_epochs, 1, 0)
    model, trace = pretrain_nakws(
        manifest,
        MixConfig(cfg.snr_db, sources),
        ModelConfig(cfg.size_tag, cfg.num_classes),
        train_cfg,
        target_name=cfg.target,
    )
    return Desk(cfg, manifest, eval_manifest, sources, target, model, trace)
