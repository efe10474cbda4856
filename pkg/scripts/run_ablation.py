#!/usr/bin/env python3
"""Run the six-preset ablation at one seed and build the comparison report.

Writes one metrics CSV and summary per preset, then the cross-run report
and plot data files. The full sweep takes a few minutes; --quick swaps in a
small objective and short runs for a fast end-to-end check.
"""

import argparse
import time

from hdet.config import PRESETS, preset_config
from hdet.metrics import compare, run_experiment
from hdet.objectives import ObjectiveSpec

QUICK_OBJECTIVE = ObjectiveSpec(kind="synthetic_mlp", layer_sizes=(4, 16, 1),
                                dataset_seed=7, n_samples=128, batch_size=8,
                                init_scale=6.0, target_noise=0.1)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None,
                    help="output directory (default runs/ablation-seed<seed>)")
    ap.add_argument("--mode", choices=("sequential", "threaded"),
                    default="sequential")
    ap.add_argument("--quick", action="store_true",
                    help="small objective and short runs")
    args = ap.parse_args()

    out = args.out or f"runs/ablation-seed{args.seed}"
    overrides = dict(global_seed=args.seed, execution_mode=args.mode)
    if args.quick:
        overrides.update(objective=QUICK_OBJECTIVE, world_size=4,
                         total_steps=400, sync_interval=50,
                         controller_warmup_steps=100, pretrain_steps=60,
                         record_every=20)

    paths = []
    for name in PRESETS:
        cfg = preset_config(name, **overrides)
        start = time.perf_counter()
        res = run_experiment(cfg, out)
        took = time.perf_counter() - start
        marker = res.summary["divergence_step"] or "-"
        print(f"{name:15s} final_loss={float(res.summary['final_loss']):.3e}  "
              f"divergence_step={marker:>6s}  "
              f"sync_count={res.summary['sync_count']:>4s}  [{took:5.1f}s]")
        paths.append(res.csv_path)

    report = compare(paths, out_dir=out)
    print()
    print(report.text)
    print(f"metrics and plot data in {out}/")


if __name__ == "__main__":
    main()
