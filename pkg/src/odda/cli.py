"""Command-line harness: ``odda {pretrain,quantize,adapt,eval,cost}``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .audio_io import SOURCE, TARGET, NoiseProfile, load_wav, read_manifest, synth_dataset, synth_noise
from .config import load_config
from .cost import cost_report, get_profile, reports_to_csv
from .dsp import MfccConfig, MixConfig
from .errors import ConfigError, DataError, OddaError
from .model import build_model, load_checkpoint, save_checkpoint, trainable_param_count
from .pipeline import (
    AdaptationRun,
    ModelConfig,
    adapt,
    clips_for,
    evaluate,
    freeze_and_quantize,
    pretrain_nakws,
    subsample,
    trace_csv,
)
from .train import TrainConfig

log = logging.getLogger("odda")

# GSC-12 training-split size used for the data-fraction sweep
FULL_DATASET = 37000
SWEEP_FRACTIONS = (0.01, 0.1, 1.0)


class Experiment:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.mfcc = MfccConfig(**vars(cfg.mfcc))
        self._manifest = None

    @property
    def manifest(self):
        if self._manifest is None:
            d = self.cfg.dataset
            if d.manifest:
                self._manifest = read_manifest(d.manifest, d.classes or None)
            else:
                self._manifest = synth_dataset(d.synth_task_size, d.synth_per_class, d.synth_seed)
            if self._manifest.task_size != self.cfg.model.num_classes:
                raise ConfigError(
                    "BAD_CLASSES",
                    f"dataset has {self._manifest.task_size} classes, model.num_classes={self.cfg.model.num_classes}",
                )
        return self._manifest

    def noise(self, name, role):
        n = self.cfg.noise
        if n.noise_dir:
            clip = load_wav(Path(n.noise_dir) / f"{name}.wav")
            clip.source_id = name
        else:
            clip = synth_noise(name, n.noise_seconds, seed=0)
        return NoiseProfile(clip, role)

    def sources(self):
        return [self.noise(s, SOURCE) for s in self.cfg.noise.sources]

    def target(self):
        return self.noise(self.cfg.noise.target, TARGET)

    def store(self):
        a = self.cfg.adapt
        classes = range(a.store_classes) if a.store_classes else None
        if a.fraction > 0:
            return subsample(self.manifest, fraction=a.fraction, seed=self.cfg.seed, classes=classes)
        return subsample(self.manifest, per_class=a.per_class, seed=self.cfg.seed, classes=classes)

    def write(self, name, text):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        return path

    def echo_config(self):
        self.write("effective_config.json", self.cfg.to_json())


def _checkpoint(args, exp, default):
    return Path(args.checkpoint) if args.checkpoint else exp.out / default


def cmd_pretrain(args, exp):
    cfg = exp.cfg
    t = cfg.train
    train_cfg = TrainConfig(t.learning_rate, t.batch_size, t.epochs, 1, cfg.seed)
    mix = MixConfig(cfg.noise.snr_db, exp.sources())
    model, trace = pretrain_nakws(
        exp.manifest, mix, ModelConfig(cfg.model.size_tag, cfg.model.num_classes), train_cfg, cfg.noise.target, exp.mfcc
    )
    path = exp.out / "nakws.ckpt"
    save_checkpoint(model, path)
    exp.write("pretrain_trace.csv", trace_csv(trace))
    log.info("wrote %s", path)


def cmd_quantize(args, exp):
    cfg = exp.cfg
    model = load_checkpoint(_checkpoint(args, exp, "nakws.ckpt"))
    train = exp.manifest.split("train")
    calib = clips_for(exp.manifest, train[:: max(1, len(train) // cfg.adapt.calibration_clips)][: cfg.adapt.calibration_clips])
    frozen = freeze_and_quantize(model, calib, cfg.adapt.k, exp.mfcc)
    path = exp.out / "frozen.ckpt"
    save_checkpoint(frozen, path)
    log.info("trainable params: %d", trainable_param_count(frozen))
    log.info("wrote %s", path)


def cmd_adapt(args, exp):
    cfg = exp.cfg
    a = cfg.adapt
    store = exp.store()
    if not store.entries:
        raise DataError("EMPTY_STORE", "subsampling selected no stored utterances")
    if args.dry_run:
        model = build_model(cfg.model.size_tag, cfg.model.num_classes)
    else:
        model = load_checkpoint(_checkpoint(args, exp, "frozen.ckpt"))
    profile = get_profile(model.size_tag, cfg.platform.mode)
    report = cost_report(model, a.k, len(store.entries), a.batch_size, a.epochs, profile)
    exp.write("cost_report.json", report.to_json())
    log.info("t_odda %.3f s, energy %.4f J", report.t_odda_seconds, report.energy_joules)
    if args.dry_run:
        return
    run = AdaptationRun(
        model,
        exp.target(),
        store,
        TrainConfig(a.learning_rate, a.batch_size, a.epochs, a.k, cfg.seed),
        cfg.noise.snr_db,
        exp.mfcc,
    )
    adapted, trace = adapt(run)
    save_checkpoint(adapted, exp.out / "adapted.ckpt")
    exp.write("adapt_trace.csv", trace_csv(trace, "accuracy"))


def cmd_eval(args, exp):
    cfg = exp.cfg
    ckpt = _checkpoint(args, exp, "adapted.ckpt")
    model = load_checkpoint(ckpt)
    choice = args.noise or "target"
    if choice == "none":
        noise = None
    elif choice == "target":
        noise = exp.target()
    elif choice == "sources":
        noise = exp.sources()
    else:
        noise = exp.noise(choice, SOURCE)
    report = evaluate(model, exp.manifest, args.split, noise, cfg.noise.snr_db, exp.mfcc)
    tag = f"{ckpt.stem}_{choice}"
    exp.write(f"eval_{tag}.json", report.to_json())
    exp.write(f"eval_{tag}_per_class.csv", report.per_class_csv(exp.manifest.class_names))
    log.info("%s top-1 %.2f%% on %d clips (%s)", ckpt.name, report.top1_accuracy, report.n_samples, report.condition)


def cost_sweep(cfg):
    """Rows over adaptation depth, data fraction and model size."""
    a = cfg.adapt
    mode = cfg.platform.mode
    s_store = a.per_class * (a.store_classes or cfg.model.num_classes)
    rows, meta = [], []
    base = build_model(cfg.model.size_tag, cfg.model.num_classes)
    for k in range(1, base.num_param_layers + 1):
        rows.append(cost_report(base, k, s_store, a.batch_size, a.epochs, get_profile(base.size_tag, mode)))
        meta.append({"sweep": "depth", "size_tag": base.size_tag, "k": k, "fraction": "", "mode": mode})
    for f in SWEEP_FRACTIONS:
        n = int(round(f * FULL_DATASET))
        rows.append(cost_report(base, a.k, n, a.batch_size, a.epochs, get_profile(base.size_tag, mode)))
        meta.append({"sweep": "data", "size_tag": base.size_tag, "k": a.k, "fraction": f, "mode": mode})
    for size in ("S", "M", "L"):
        m = build_model(size, cfg.model.num_classes)
        rows.append(cost_report(m, a.k, s_store, a.batch_size, a.epochs, get_profile(size, mode)))
        meta.append({"sweep": "size", "size_tag": size, "k": a.k, "fraction": "", "mode": mode})
    return rows, meta


def cmd_cost(args, exp):
    rows, meta = cost_sweep(exp.cfg)
    path = exp.write("cost_sweep.csv", reports_to_csv(rows, meta))
    log.info("wrote %s (%d rows)", path, len(rows))


COMMANDS = {
    "pretrain": cmd_pretrain,
    "quantize": cmd_quantize,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "cost": cmd_cost,
}


def build_parser():
    p = argparse.ArgumentParser(prog="odda", description="On-device domain adaptation for keyword spotting.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--checkpoint", help="input checkpoint (quantize/adapt/eval)")
    p.add_argument("--dry-run", action="store_true", help="adapt: write the cost report only")
    p.add_argument("--noise", help="eval: none, target, sources, or a noise name")
    p.add_argument("--split", default="test", help="eval: manifest split")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_overrides(extra):
    """``--section.key value`` pairs left over after the known flags."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError("BAD_ARGS", f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError("BAD_ARGS", f"flag {tok} needs a value")
            value = extra[i + 1]
            i += 2
        out.append((key.replace("-", "_"), value))
    return out


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr, force=True
    )
    try:
        overrides = parse_overrides(extra)
        if args.seed is not None:
            overrides.append(("seed", args.seed))
        if args.out is not None:
            overrides.append(("out", args.out))
        cfg = load_config(args.config, overrides)
        exp = Experiment(cfg)
        exp.echo_config()
        COMMANDS[args.command](args, exp)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        return 3
    except OddaError as exc:
        log.error("error: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
