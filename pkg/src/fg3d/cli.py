"""Command-line interface: synth, scan, detect, dataset, train, generate,
generate-landscape, eval, theory-check, biometrics."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import biometrics, detect, diffusion, geom, io, metrics, pipeline, scansim, synthforest, theory
from .diffusion import TrainConfig
from .pipeline import RunConfig
from ._util import derive_seed


def _add_synth(sub):
    p = sub.add_parser("synth", help="generate a synthetic labeled scene")
    p.add_argument("--n-trees", type=int, default=30)
    p.add_argument("--area-radius", type=float, default=40.0)
    p.add_argument("--min-spacing", type=float, default=7.0)
    p.add_argument("--cluster-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _cmd_synth(args) -> int:
    scene = synthforest.generate_forest(
        args.n_trees,
        args.area_radius,
        min_spacing=args.min_spacing,
        seed=args.seed,
        cluster_fraction=args.cluster_fraction,
    )
    synthforest.save_scene(scene, args.out)
    print(f"scene: {len(scene.trees)} trees, {len(scene.cloud)} points -> {args.out}")
    return 0


def _add_scan(sub):
    p = sub.add_parser("scan", help="simulate ALS and TLS scans of a scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--als-density", type=float, default=15.0)
    p.add_argument("--tls-range", type=float, default=25.0)
    p.add_argument("--tls-poses", default=None, help="CSV of x,y poses; default = auto grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _cmd_scan(args) -> int:
    scene = synthforest.load_scene(args.scene)
    als_sensor = scansim.AlsSensor(point_density=args.als_density)
    tls_sensor = scansim.TlsSensor(max_range=args.tls_range)
    if args.tls_poses:
        poses = io.read_pose_csv(args.tls_poses)
    else:
        radius = float(np.linalg.norm(scene.cloud.points[:, :2], axis=1).max())
        poses = pipeline.auto_poses(radius, 0.7 * args.tls_range)
    als = scansim.simulate_als(scene, als_sensor, derive_seed(args.seed, "als"))
    tls = scansim.simulate_tls(scene, poses, tls_sensor, derive_seed(args.seed, "tls"))
    out = io.ensure_dir(args.out)
    io.write_ply(out / "als.ply", als)
    io.write_ply(out / "tls.ply", tls)
    io.write_pose_csv(out / "poses.csv", poses)
    print(f"als: {len(als)} points, tls: {len(tls)} points -> {out}")
    return 0


def _add_detect(sub):
    p = sub.add_parser("detect", help="detect trees in a point cloud")
    p.add_argument("--in", dest="cloud", required=True)
    p.add_argument("--cell", type=float, default=0.5)
    p.add_argument("--min-height", type=float, default=2.0)
    p.add_argument("--out", required=True)


def _cmd_detect(args) -> int:
    cloud = io.read_ply(args.cloud) if args.cloud.endswith(".ply") else io.read_xyz(args.cloud)
    cfg = detect.DetectConfig(cell=args.cell, min_height=args.min_height)
    boxes = detect.detect_trees(cloud, cfg)
    detect.save_boxes(args.out, boxes)
    print(f"{len(boxes)} boxes -> {args.out}")
    return 0


def _add_dataset(sub):
    p = sub.add_parser("dataset", help="build a paired training dataset from a run config")
    p.add_argument("--config", default=None, help="RunConfig JSON; defaults used if omitted")
    p.add_argument("--seed", type=int, default=None, help="override master seed")
    p.add_argument("--out", required=True)


def _cmd_dataset(args) -> int:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = RunConfig.from_dict({**config.to_dict(), "master_seed": args.seed})
    manifest = pipeline.build_dataset(config, args.out)
    print(
        f"pairs: {manifest['n_pairs']} (skipped {manifest['n_skipped']}), "
        f"splits: {manifest['split_counts']}, eps_hat: {manifest['eps_hat_train']:.4f}"
    )
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train the conditional denoiser on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--out", required=True)


def _cmd_train(args) -> int:
    from .nn import DenoiserConfig

    data = pipeline.load_dataset(args.data)
    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    if "arch" in overrides:
        overrides["arch"] = DenoiserConfig.from_dict(overrides["arch"])
    if args.unconditional:
        overrides["conditional"] = False
    cfg = TrainConfig(**overrides)
    try:
        weights, history = diffusion.train(
            data["splits"]["train"], cfg, data["splits"]["val"]
        )
    except diffusion.NonFiniteLoss as exc:
        dump = Path(args.out).with_suffix(".diagnostics.json")
        dump.write_text(json.dumps(exc.diagnostics, indent=2, sort_keys=True, default=float))
        print(f"training aborted: {exc} (state dump: {dump})", file=sys.stderr)
        return 1
    diffusion.save_checkpoint(args.out, weights)
    hist_path = Path(args.out).with_suffix(".history.json")
    hist_path.write_text(json.dumps(history.to_dicts(), indent=2, sort_keys=True))
    final = history.checkpoints[-1]
    print(
        f"trained {final.iteration} steps, loss {final.train_loss:.4f}, "
        f"val cd {final.val_cd:.5f} emd {final.val_emd:.5f} epc {final.val_epc:.4f} -> {args.out}"
    )
    return 0


def _add_generate(sub):
    p = sub.add_parser("generate", help="generate a cloud from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cond", default=None, help="ALS condition cloud (PLY)")
    p.add_argument("--unconditional", action="store_true")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--merge-voxel", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--world-frame", action="store_true",
                   help="normalize the condition and map the generation back to its frame")


def _cmd_generate(args) -> int:
    weights = diffusion.load_checkpoint(args.ckpt)
    sched = diffusion.schedule_from_weights(weights)
    cond = None
    transform = None
    if not args.unconditional:
        if not args.cond:
            print("either --cond or --unconditional is required", file=sys.stderr)
            return 2
        cond_cloud = io.read_ply(args.cond)
        if args.world_frame:
            cond_cloud, transform = geom.normalize_unit_cube(cond_cloud)
        cond = cond_cloud.points
    gen = diffusion.ensemble_sample(
        weights, cond, args.n, args.runs, sched, args.seed, args.merge_voxel
    )
    if transform is not None:
        gen = transform.invert(gen)
    io.write_ply(args.out, geom.PointCloud(gen))
    print(f"{len(gen)} points -> {args.out}")
    return 0


def _add_generate_landscape(sub):
    p = sub.add_parser("generate-landscape", help="detect and fill an ALS-only region")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--als", required=True)
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _cmd_generate_landscape(args) -> int:
    weights = diffusion.load_checkpoint(args.ckpt)
    als = io.read_ply(args.als)
    gen_cfg = pipeline.GenConfig(n_points=args.n, runs=args.runs)
    result = pipeline.generate_landscape(weights, als, gen_cfg, seed=args.seed)
    out = io.ensure_dir(args.out)
    io.write_ply(out / "merged.ply", result.merged)
    gen_only = (
        np.vstack([r.points_world for r in result.per_tree])
        if result.per_tree
        else np.zeros((0, 3))
    )
    if len(gen_only):
        io.write_ply(out / "generated.ply", geom.PointCloud(gen_only))
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True))
    print(json.dumps(result.summary, sort_keys=True))
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="score a generation or a whole test split")
    p.add_argument("--gen", default=None)
    p.add_argument("--ref", default=None)
    p.add_argument("--cond", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-emd-n", type=int, default=pipeline.EMD_GUARD_N,
                   help="downsample both clouds to this size for the exact EMD solve")
    p.add_argument("--out", required=True)


def _cmd_eval(args) -> int:
    if args.dataset and args.ckpt:
        weights = diffusion.load_checkpoint(args.ckpt)
        report = pipeline.evaluate_run(args.dataset, weights, Path(args.out).parent, seed=args.seed)
        print(f"cd {report['cd_mean']:.5f} emd {report['emd_mean']:.5f} epc {report['epc_mean']:.4f}")
        return 0
    if not (args.gen and args.ref and args.cond):
        print("need --gen/--ref/--cond, or --dataset/--ckpt", file=sys.stderr)
        return 2
    gen = io.read_ply(args.gen)
    ref = io.read_ply(args.ref)
    cond = io.read_ply(args.cond)
    n = min(args.max_emd_n, len(gen), len(ref))
    emd = metrics.emd_exact(
        geom.subsample_fixed(gen, n, derive_seed(args.seed, "g")).points,
        geom.subsample_fixed(ref, n, derive_seed(args.seed, "r")).points,
    )
    dev = metrics.deviation_stats(gen.points, cond.points)
    report = {
        "frame": "unit-cube",
        "cd": metrics.chamfer(gen.points, ref.points),
        "emd": emd,
        "epc": metrics.epc(gen.points, cond.points),
        "deviation": dev.to_dict(),
    }
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({k: report[k] for k in ("cd", "emd", "epc")}, sort_keys=True))
    return 0


def _add_theory_check(sub):
    p = sub.add_parser("theory-check", help="exhaustively verify the containment bound")
    p.add_argument("--instances", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _cmd_theory_check(args) -> int:
    report = theory.exhaustive_check(args.instances, args.seed)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"all_hold: {report['all_hold']} over {report['n_instances']} instances -> {args.out}")
    return 0 if report["all_hold"] else 1


def _add_biometrics(sub):
    p = sub.add_parser("biometrics", help="per-tree biometric records for a cloud")
    p.add_argument("--in", dest="cloud", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--source", default="TLS")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--compare", default=None, help="records CSV of the reference source")
    p.add_argument("--compare-out", default=None)


def _cmd_biometrics(args) -> int:
    cloud = io.read_ply(args.cloud) if args.cloud.endswith(".ply") else io.read_xyz(args.cloud)
    boxes = detect.load_boxes(args.boxes)
    records = biometrics.plot_biometrics(cloud, boxes, args.source, seed=args.seed)
    biometrics.write_records_csv(args.out, records)
    print(f"{len(records)} records -> {args.out}")
    if args.compare:
        reference = biometrics.read_records_csv(args.compare)
        ref_source = reference[0].source if reference else "REF"
        table = biometrics.compare_sources(
            {args.source: records, ref_source: reference}, ref_source
        )
        out = args.compare_out or str(Path(args.out).with_suffix(".compare.json"))
        Path(out).write_text(json.dumps(table, indent=2, sort_keys=True, default=float))
        print(f"comparison -> {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fg3d",
        description="Synthetic ALS/TLS forest pipeline: simulate, train, generate, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (
        _add_synth, _add_scan, _add_detect, _add_dataset, _add_train,
        _add_generate, _add_generate_landscape, _add_eval, _add_theory_check,
        _add_biometrics,
    ):
        add(sub)
    args = parser.parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "scan": _cmd_scan,
        "detect": _cmd_detect,
        "dataset": _cmd_dataset,
        "train": _cmd_train,
        "generate": _cmd_generate,
        "generate-landscape": _cmd_generate_landscape,
        "eval": _cmd_eval,
        "theory-check": _cmd_theory_check,
        "biometrics": _cmd_biometrics,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
