#!/usr/bin/env python3
"""Desk-scale reference run: ~200 pairs, N=256, T=100, CPU-friendly.

This is the configuration the acceptance suite exercises; expect roughly
half an hour end to end on two cores.
"""

import argparse
from pathlib import Path

from fg3d import diffusion, nn, pipeline
from fg3d.diffusion import TrainConfig
from fg3d.pipeline import GenConfig, RunConfig, SceneConfig

DESK_PARAM_RANGES = {
    "height": (6.0, 19.0),
    "dbh": (0.15, 0.5),
    "crown_base_frac": (0.2, 0.55),
    "crown_radius": (1.0, 3.4),
    "whorl_count": (3, 9),
    "foliage_density": (10.0, 32.0),
    "taper_exponent": (0.5, 1.1),
}


def desk_config(seed: int, iterations: int) -> RunConfig:
    arch = nn.DenoiserConfig(
        cond_widths=(96, 192), d_c=96, point_width=64, time_dim=32, width=128, n_blocks=4
    )
    return RunConfig(
        scene=SceneConfig(
            n_trees=230, area_radius=68.0, min_spacing=7.0, cluster_fraction=0.1,
            param_ranges=DESK_PARAM_RANGES,
        ),
        train=TrainConfig(
            T=100, beta0=1e-3, betaT=0.2, batch_size=16, n_points=256, cond_points=384,
            iterations=iterations, seed=seed, arch=arch, lr_decay=True, ema_decay=0.9993,
            checkpoint_every=max(250, iterations // 8), val_pairs=8, val_points=256,
        ),
        gen=GenConfig(n_points=1024),
        master_seed=seed,
        max_pairs=200,
    )


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--seed", type=int, default=20240817)
    parser.add_argument("--iterations", type=int, default=9500)
    args = parser.parse_args()

    out = Path(args.out)
    config = desk_config(args.seed, args.iterations)
    manifest = pipeline.build_dataset(config, out / "dataset")
    print(f"pairs: {manifest['n_pairs']}, eps_hat: {manifest['eps_hat_train']:.4f}")

    data = pipeline.load_dataset(out / "dataset")
    weights, history = diffusion.train(
        data["splits"]["train"], config.train, data["splits"]["val"]
    )
    diffusion.save_checkpoint(out / "model.fg3d", weights)
    for ckpt in history.checkpoints:
        print(f"  it {ckpt.iteration:6d} loss {ckpt.train_loss:.4f} "
              f"cd {ckpt.val_cd:.5g} emd {ckpt.val_emd:.5g} epc {ckpt.val_epc:.4f}")

    report = pipeline.evaluate_run(out / "dataset", weights, out / "eval", seed=args.seed)
    print(f"test: cd {report['cd_mean']:.5f} emd {report['emd_mean']:.5f} "
          f"epc {report['epc_mean']:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
