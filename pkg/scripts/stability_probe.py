#!/usr/bin/env python3
"""Measure the peak-LR crash threshold for cold and warm starts.

Sweeps eta_max over a grid for the ablation objective and reports, per
init, the largest peak LR whose run stays below the 10x crash bar. This is
the probe that sits behind the preset constants: the cold init saturates
the hidden tanh layer and crashes at roughly half the peak LR the warm
start survives.
"""

import argparse

import numpy as np

from hdet.config import preset_config, resolve_checkpoint
from hdet.metrics import divergence_step
from hdet.engine import run
from hdet.objectives import ObjectiveSpec

PROBE_OBJECTIVE = ObjectiveSpec(kind="synthetic_mlp", layer_sizes=(4, 64, 1),
                                dataset_seed=7, n_samples=512, batch_size=16,
                                init_scale=6.0, target_noise=0.1)


def crash_step(preset: str, eta_max: float, steps: int, seed: int) -> int | None:
    cfg = preset_config(preset, objective=PROBE_OBJECTIVE, world_size=4,
                        total_steps=steps, sync_interval=steps // 20,
                        controller_warmup_steps=0, eta_max=eta_max,
                        pretrain_steps=200, global_seed=seed, record_every=5)
    result = run(cfg.to_run_config(resolve_checkpoint(cfg)))
    return divergence_step(result.records)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    grid = np.geomspace(0.01, 0.3, 9)
    for preset, label in (("baseline-high", "cold"), ("warm-init", "warm")):
        survived = None
        print(f"{label} init:")
        for eta in grid:
            marker = crash_step(preset, float(eta), args.steps, args.seed)
            state = "ok" if marker is None else f"crash@{marker}"
            print(f"  eta_max={eta:8.4f}  {state}")
            if marker is None:
                survived = float(eta)
        if survived is None:
            print("  every probe crashed; lower the grid")
        else:
            print(f"  largest surviving eta_max: {survived:.4f}")


if __name__ == "__main__":
    main()
