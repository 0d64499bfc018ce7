"""Cost-model tables: model budgets, the S/M/L x LPM/HPM adaptation grid,
and the depth and data-fraction sweeps.

    python scripts/cost_tables.py [--epochs 21] [--samples 100] [--batch 2]
"""

import argparse
import sys

from odda.cost import (
    backsolve_epochs,
    cost_report,
    count_backward_flops,
    count_forward_flops,
    get_profile,
    memory_report,
    total_odda_flops,
)
from odda.model import BUDGETS, build_model, param_bytes

SIZES = ("S", "M", "L")


def budgets():
    print(f"{'size':<5}{'params B':>10}{'target':>9}{'MFLOPs':>9}{'target':>9}")
    for s in SIZES:
        m, b = build_model(s, 12), BUDGETS[s]
        print(f"{s:<5}{param_bytes(m):>10}{b.target_params_bytes:>9}"
              f"{count_forward_flops(m) / 1e6:>9.2f}{b.target_forward_mflops:>9.2f}")


def platform_grid(samples, batch, epochs):
    print(f"\n{'size':<5}{'mode':<5}{'t (s)':>9}{'E (J)':>9}{'mem B':>8}{'store B':>10}")
    for s in SIZES:
        m = build_model(s, 12)
        for mode in ("LPM", "HPM"):
            r = cost_report(m, 1, samples, batch, epochs, get_profile(s, mode))
            print(f"{s:<5}{mode:<5}{r.t_odda_seconds:>9.3f}{r.energy_joules:>9.4f}"
                  f"{r.total_rw_memory_bytes:>8}{r.storage_bytes:>10}")


def depth_sweep(batch):
    m = build_model("S", 12)
    print(f"\n{'k':>3}{'bwd FLOPs':>12}{'mem B':>9}")
    for k in range(1, m.num_param_layers + 1):
        print(f"{k:>3}{count_backward_flops(m, k):>12}{memory_report(m, k, batch).total_rw_memory_bytes:>9}")


def data_sweep(epochs):
    m = build_model("S", 12)
    full = 37000
    print(f"\n{'fraction':>8}{'clips':>7}{'k=1 GFLOPs':>12}{'k=10 GFLOPs':>13}")
    for f in (0.01, 0.1, 1.0):
        n = round(f * full)
        print(f"{f:>8}{n:>7}{total_odda_flops(m, 1, n, epochs) / 1e9:>12.3f}"
              f"{total_odda_flops(m, 10, n, epochs) / 1e9:>13.3f}")
    print(f"epochs implied by 10.46 TFLOPs at k=10 on the full set: {backsolve_epochs(m, 10, full, 10.46e12):.1f}")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--epochs", type=int, default=21)
    args = p.parse_args(argv)
    budgets()
    platform_grid(args.samples, args.batch, args.epochs)
    depth_sweep(args.batch)
    data_sweep(args.epochs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
