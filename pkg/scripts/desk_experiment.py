"""Desk-scale adaptation experiment on the synthetic chirp task.

Pretrains on source noises, freezes at k=1, then adapts to the held-out target
noise and prints accuracy medians over seeds. A silence target is included as
a control: adapting to it should leave clean accuracy where it was.

    python scripts/desk_experiment.py [--quick] [--csv results.csv]
"""

import argparse
import csv
import dataclasses
import logging
import sys
import time

import numpy as np

from odda.audio_io import TARGET, NoiseProfile, synth_noise
from odda.desk import DeskConfig, build_desk


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--quick", action="store_true", help="three seeds, fewer pretraining epochs")
    p.add_argument("--target", default="babble")
    p.add_argument("--csv", help="write one row per (setting, seed)")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = DeskConfig(target=args.target)
    if args.quick:
        cfg = dataclasses.replace(cfg, pretrain_epochs=8, adapt_seeds=(0, 1, 2))
    t0 = time.time()
    desk = build_desk(cfg)
    print(f"pretrained in {time.time() - t0:.0f} s, best val {max(r[2] for r in desk.trace):.1f}%")

    frozen = desk.frozen(1)
    base = desk.accuracy(frozen, desk.target)
    clean = desk.accuracy(frozen, None)
    print(f"frozen k=1: clean {clean:.1f}%, {cfg.target}@{cfg.snr_db:g}dB {base:.1f}%")
    print(f"int8 vs float agreement (clean): {desk.agreement(desk.float_model, frozen):.1%}")

    full = desk.float_model.num_param_layers
    silence = NoiseProfile(synth_noise("silence", cfg.noise_seconds), TARGET)
    settings = [
        ("k=1, 10/class", 1, 10, None),
        ("k=1, 50/class", 1, 50, None),
        (f"k={full}, 10/class", full, 10, None),
        ("silence control", 1, 10, silence),
    ]
    rows = []
    print(f"\n{'setting':<18} {'median':>7} {'delta':>7}  per-seed")
    for name, k, n, target in settings:
        accs = desk.adapted_accuracies(k, n, target=target)
        ref = clean if target is silence else base
        med = float(np.median(accs))
        print(f"{name:<18} {med:7.1f} {med - ref:+7.1f}  " + " ".join(f"{a:.1f}" for a in accs))
        rows += [{"setting": name, "k": k, "per_class": n, "seed": s, "accuracy": a}
                 for s, a in zip(cfg.adapt_seeds, accs)]
    print(f"\ntotal {time.time() - t0:.0f} s")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
