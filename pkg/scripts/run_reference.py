#!/usr/bin/env python3
"""Paired runs of the full pipeline against the supervised baseline.

For each seed, trains both on the same dataset and prints the test-error
delta; artifacts for each run land under OUT/seed<k>/{r2d2,baseline}.

Usage: python scripts/run_reference.py --out runs/reference [--seeds 5]
       [--dataset gaussians|two_moons] [--key value ...]
"""

import argparse
import csv
import os
import sys

from d2ssl.cli import ExperimentConfig, build_dataset
from d2ssl.trainer import run_r2d2, run_supervised_baseline, write_metrics


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--dataset", default="gaussians",
                    choices=["gaussians", "two_moons"])
    return ap.parse_known_args()


def main():
    args, extra = parse_args()
    overrides = dict(zip([k.lstrip("-") for k in extra[::2]], extra[1::2]))
    rows = []
    for seed in range(args.seeds):
        cfg = ExperimentConfig(seed=seed, dataset=args.dataset)
        if args.dataset == "two_moons":
            cfg.layer_sizes = "2,64,2,2"
            cfg.stage2_epochs = "100,100,100,100"
        for key, value in overrides.items():
            setattr(cfg, key, type(getattr(cfg, key))(value))
        ds = build_dataset(cfg)
        _, _, m = run_r2d2(ds, cfg.model_sizes(), cfg.activation,
                           cfg.d2_config(), cfg.schedule_plan(), seed)
        _, mb = run_supervised_baseline(ds, cfg.model_sizes(), cfg.activation,
                                        cfg.schedule_plan(), seed)
        err, err_base = 1 - m[-1].acc_test, 1 - mb[-1].acc_test
        seed_dir = os.path.join(args.out, f"seed{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        write_metrics(m, os.path.join(seed_dir, "r2d2_metrics.csv"))
        write_metrics(mb, os.path.join(seed_dir, "baseline_metrics.csv"))
        rows.append((seed, err, err_base, err_base - err))
        print(f"seed {seed}: r2d2 {err:.4f}  baseline {err_base:.4f}  "
              f"delta {err_base - err:+.4f}")
    with open(os.path.join(args.out, "comparison.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "r2d2_error", "baseline_error", "delta"])
        w.writerows(rows)
    wins = sum(r[3] > 0 for r in rows)
    print(f"{wins}/{len(rows)} seeds improved over the baseline")
    return 0


if __name__ == "__main__":
    sys.exit(main())
