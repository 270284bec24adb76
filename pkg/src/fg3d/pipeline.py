"""End-to-end orchestration: dataset build, landscape generation, evaluation.

One master seed derives every stage seed, so a full run is bitwise
reproducible: dataset files, checkpoints, generations, and reports.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import biometrics, detect, diffusion, geom, io, metrics, scansim, synthforest, theory
from .detect import BBox3, DetectConfig
from .diffusion import DenoiserWeights, TrainConfig
from .geom import PointCloud
from .scansim import AlsSensor, TlsSensor, TreePair
from ._util import derive_seed, ordered_map

FORMAT_VERSION = "fg3d-dataset-1"


@dataclass(frozen=True)
class SceneConfig:
    n_trees: int = 60
    area_radius: float = 45.0
    min_spacing: float = 7.0
    cluster_fraction: float = 0.1
    understory: bool = True
    param_ranges: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ScanConfig:
    als: AlsSensor = AlsSensor()
    tls: TlsSensor = TlsSensor()
    tls_pose_spacing: float = 18.0


@dataclass(frozen=True)
class GenConfig:
    n_points: int = 2048
    runs: int = 1
    merge_voxel: float = 0.0
    plot_radius: float = 25.0
    landscape_radius: float = 200.0
    min_box_points: int = 32


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = SceneConfig()
    scan: ScanConfig = ScanConfig()
    detect: DetectConfig = DetectConfig()
    train: TrainConfig = TrainConfig()
    gen: GenConfig = GenConfig()
    master_seed: int = 0
    max_pairs: int = 0  # 0 = keep all extracted pairs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["arch"] = self.train.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        from .nn import DenoiserConfig

        train = dict(d.get("train", {}))
        if "arch" in train:
            train["arch"] = DenoiserConfig.from_dict(train["arch"])
        scan = dict(d.get("scan", {}))
        if "als" in scan:
            scan["als"] = AlsSensor(**scan["als"])
        if "tls" in scan:
            scan["tls"] = TlsSensor(**scan["tls"])
        return cls(
            scene=SceneConfig(**d.get("scene", {})),
            scan=ScanConfig(**scan),
            detect=DetectConfig(**d.get("detect", {})),
            train=TrainConfig(**train),
            gen=GenConfig(**d.get("gen", {})),
            master_seed=int(d.get("master_seed", 0)),
            max_pairs=int(d.get("max_pairs", 0)),
        )

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    ).hexdigest()


def auto_poses(area_radius: float, spacing: float) -> np.ndarray:
    """Square pose grid covering the scene disk."""
    ticks = np.arange(-area_radius, area_radius + spacing, spacing)
    gx, gy = np.meshgrid(ticks, ticks)
    poses = np.column_stack([gx.ravel(), gy.ravel()])
    keep = np.linalg.norm(poses, axis=1) <= area_radius + spacing / 2.0
    return poses[keep]


# ---------------------------------------------------------------------------
# Dataset build
# ---------------------------------------------------------------------------


def _split_ids(ids, rng: np.random.Generator) -> dict:
    ids = sorted(ids)
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n = len(ids)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    assignment = {}
    for rank, tree_id in enumerate(shuffled):
        if rank < n_train:
            assignment[tree_id] = "train"
        elif rank < n_train + n_val:
            assignment[tree_id] = "val"
        else:
            assignment[tree_id] = "test"
    return assignment


def _pair_split(pair: TreePair, assignment: dict) -> str:
    if not pair.tree_ids:
        return "train"
    votes: dict[str, int] = {}
    for tree_id in pair.tree_ids:
        votes[assignment[tree_id]] = votes.get(assignment[tree_id], 0) + 1
    best = max(votes.values())
    tied = sorted(s for s, v in votes.items() if v == best)
    if len(tied) == 1:
        return tied[0]
    return assignment[min(pair.tree_ids)]


def build_dataset(config: RunConfig, out_dir) -> dict:
    """Scene -> scans -> detection -> pairs -> split -> serialized dataset.

    Returns the manifest dict; every artifact lands under out_dir.
    """
    out = io.ensure_dir(out_dir)
    seed = config.master_seed
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    scene = synthforest.generate_forest(
        config.scene.n_trees,
        config.scene.area_radius,
        config.scene.param_ranges,
        config.scene.min_spacing,
        derive_seed(seed, "scene"),
        cluster_fraction=config.scene.cluster_fraction,
        understory=config.scene.understory,
    )
    synthforest.save_scene(scene, out / "scene")
    timings["scene"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    als = scansim.simulate_als(scene, config.scan.als, derive_seed(seed, "als"))
    poses = auto_poses(config.scene.area_radius, config.scan.tls_pose_spacing)
    tls = scansim.simulate_tls(scene, poses, config.scan.tls, derive_seed(seed, "tls"))
    scans = io.ensure_dir(out / "scans")
    io.write_ply(scans / "als.ply", als)
    io.write_ply(scans / "tls.ply", tls)
    io.write_pose_csv(scans / "poses.csv", poses)
    timings["scan"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    union = geom.concat_clouds([als, tls])
    ground = biometrics.ground_model_for(union, cell=1.0)
    boxes = detect.detect_trees(union, config.detect, ground)
    detect.save_boxes(out / "boxes.json", boxes)
    pairs, skipped = scansim.extract_pairs(scene, als, tls, boxes)
    if config.max_pairs > 0:
        pairs = pairs[: config.max_pairs]
    timings["detect_extract"] = time.perf_counter() - t0
    if not pairs:
        raise RuntimeError("dataset build produced no pairs (stage: extract_pairs)")

    all_ids = sorted({i for p in pairs for i in p.tree_ids})
    assignment = _split_ids(all_ids, np.random.default_rng(derive_seed(seed, "split")))
    pair_dir = io.ensure_dir(out / "pairs")
    counts = {"train": 0, "val": 0, "test": 0}
    pair_meta = []
    for idx, pair in enumerate(pairs):
        split = _pair_split(pair, assignment)
        counts[split] += 1
        stem = f"pair_{idx:05d}"
        io.write_ply(pair_dir / f"{stem}_als.ply", pair.als)
        io.write_ply(pair_dir / f"{stem}_tls.ply", pair.tls)
        meta = {
            "index": idx,
            "split": split,
            "transform": pair.transform.to_dict(),
            "bbox": pair.bbox.to_dict(),
            "tree_ids": sorted(pair.tree_ids),
            "n_als": len(pair.als),
            "n_tls": len(pair.tls),
        }
        (pair_dir / f"{stem}_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        pair_meta.append(meta)

    train_pairs = [p for p, m in zip(pairs, pair_meta) if m["split"] == "train"]
    eps_hat, _ = theory.empirical_containment_report(train_pairs or pairs)

    from . import __version__

    manifest = {
        "format": FORMAT_VERSION,
        "fg3d_version": __version__,
        "config": config.to_dict(),
        "config_sha256": config_hash(config),
        "master_seed": seed,
        "n_boxes": len(boxes),
        "n_pairs": len(pairs),
        "n_skipped": len(skipped),
        "skip_log": skipped,
        "split_counts": counts,
        "tree_split": {str(k): v for k, v in sorted(assignment.items())},
        "eps_hat_train": eps_hat,
    }
    (out / "MANIFEST.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    return manifest


def load_dataset(dataset_dir) -> dict:
    """Pairs by split, plus manifest, read back from a dataset directory."""
    root = Path(dataset_dir)
    manifest = json.loads((root / "MANIFEST.json").read_text())
    splits: dict[str, list[TreePair]] = {"train": [], "val": [], "test": []}
    pair_dir = root / "pairs"
    for meta_path in sorted(pair_dir.glob("pair_*_meta.json")):
        meta = json.loads(meta_path.read_text())
        stem = meta_path.name.replace("_meta.json", "")
        pair = TreePair(
            als=io.read_ply(pair_dir / f"{stem}_als.ply"),
            tls=io.read_ply(pair_dir / f"{stem}_tls.ply"),
            transform=geom.UnitCubeTransform.from_dict(meta["transform"]),
            bbox=BBox3.from_dict(meta["bbox"]),
            tree_ids=frozenset(meta["tree_ids"]),
        )
        splits[meta["split"]].append(pair)
    return {"splits": splits, "manifest": manifest, "root": root}


# ---------------------------------------------------------------------------
# Landscape-scale generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeGeneration:
    box: BBox3
    points_world: np.ndarray
    stats: metrics.DeviationStats | None
    wall_time: float


@dataclass(frozen=True)
class LandscapeResult:
    per_tree: tuple
    merged: PointCloud
    summary: dict


def _count_box_overlaps(boxes) -> int:
    overlaps = 0
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            if (
                a.mins[0] <= b.maxs[0]
                and b.mins[0] <= a.maxs[0]
                and a.mins[1] <= b.maxs[1]
                and b.mins[1] <= a.maxs[1]
            ):
                overlaps += 1
    return overlaps


def generate_landscape(
    weights: DenoiserWeights,
    als_world: PointCloud,
    gen_cfg: GenConfig = GenConfig(),
    detect_cfg: DetectConfig = DetectConfig(),
    seed: int = 0,
    sched: diffusion.DiffusionSchedule | None = None,
) -> LandscapeResult:
    """Detect trees in an ALS-only cloud and generate per-box understory.

    Regions without detections are left unaltered; the merged cloud is the
    input ALS plus every generation mapped back to world coordinates.
    """
    if sched is None:
        sched = diffusion.schedule_from_weights(weights)
    ground = biometrics.ground_model_for(als_world, cell=1.0)
    boxes = detect.detect_trees(als_world, detect_cfg, ground)
    if not boxes:
        return LandscapeResult(
            per_tree=(),
            merged=als_world,
            summary={"n_boxes": 0, "n_generated": 0, "overlapping_box_pairs": 0},
        )

    def one_box(item):
        i, box = item
        crop_cloud = detect.crop(als_world, box)
        if len(crop_cloud) < gen_cfg.min_box_points:
            return None
        try:
            _, transform = geom.normalize_unit_cube(crop_cloud)
        except geom.ZeroExtent:
            return None
        cond = transform.apply(crop_cloud.points)
        t0 = time.perf_counter()
        gen = diffusion.ensemble_sample(
            weights, cond, gen_cfg.n_points, gen_cfg.runs, sched,
            derive_seed(seed, "tree", i), gen_cfg.merge_voxel,
        )
        wall = time.perf_counter() - t0
        world = transform.invert(gen)
        try:
            stats = metrics.deviation_stats(world, crop_cloud.points)
        except (metrics.DegenerateHull, metrics.EmptyCloud):
            stats = None
        return TreeGeneration(box, world, stats, wall)

    results = [r for r in ordered_map(one_box, enumerate(boxes)) if r is not None]
    merged_pts = np.vstack([als_world.points] + [r.points_world for r in results])
    out_fracs = [r.stats.out_fraction for r in results if r.stats is not None]
    out_means = [r.stats.mean_out_dist for r in results if r.stats is not None and r.stats.out_fraction > 0]
    summary = {
        "n_boxes": len(boxes),
        "n_generated": len(results),
        "overlapping_box_pairs": _count_box_overlaps(boxes),
        "mean_out_fraction": float(np.mean(out_fracs)) if out_fracs else 0.0,
        "mean_out_dist_m": float(np.mean(out_means)) if out_means else 0.0,
        "mean_wall_time_s": float(np.mean([r.wall_time for r in results])) if results else 0.0,
    }
    return LandscapeResult(tuple(results), PointCloud(merged_pts), summary)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

EMD_GUARD_N = 512  # assignment solve is cubic; cap the matched sizes


def _pair_metrics(weights, pair: TreePair, sched, n_points: int, seed: int) -> dict:
    cond = pair.als.points
    gen = diffusion.sample(weights, cond, n_points, sched, seed)
    cd = metrics.chamfer(gen, pair.tls.points)
    n_emd = min(EMD_GUARD_N, len(gen), len(pair.tls))
    gen_sub = geom.subsample_fixed(PointCloud(gen), n_emd, derive_seed(seed, "emd-g")).points
    tls_sub = geom.subsample_fixed(pair.tls, n_emd, derive_seed(seed, "emd-t")).points
    emd = metrics.emd_exact(gen_sub, tls_sub)
    try:
        epc_v = metrics.epc(gen, pair.als.points)
    except metrics.DegenerateHull:
        epc_v = float("nan")
    return {"cd": cd, "emd": emd, "epc": epc_v, "gen": gen}


def evaluate_run(
    dataset_dir,
    weights: DenoiserWeights,
    out_dir,
    seed: int = 0,
    n_points: int | None = None,
    with_biometrics: bool = True,
    ensemble_runs: int = 1,
    ransac: biometrics.RansacCircleConfig | None = None,
) -> dict:
    """Generate for every test pair, score against TLS, and write reports.

    Writes report.json (aggregates + per-pair rows, resolved config embedded)
    and per_pair.csv; optionally a biometric source-comparison table computed
    from the world-frame scans. Reconstruction metrics always use a single
    generation; ensemble_runs > 1 densifies only the clouds feeding the
    biometric tables (stem circle fits need more points than one generation
    carries).
    """
    data = load_dataset(dataset_dir)
    test_pairs = data["splits"]["test"]
    if not test_pairs:
        raise ValueError("dataset has no test pairs")
    sched = diffusion.schedule_from_weights(weights)
    n_points = n_points or int(weights.meta.get("n_points", 2048))
    out = io.ensure_dir(out_dir)

    rows = []
    gens_world: list[np.ndarray] = []
    for i, pair in enumerate(test_pairs):
        res = _pair_metrics(weights, pair, sched, n_points, derive_seed(seed, "pair", i))
        gen = res.pop("gen")
        if with_biometrics and ensemble_runs > 1:
            gen = diffusion.ensemble_sample(
                weights, pair.als.points, n_points, ensemble_runs, sched,
                derive_seed(seed, "ens", i),
            )
        gens_world.append(pair.transform.invert(gen))
        rows.append({"pair": i, **res})

    report = {
        "frame": "unit-cube",
        "n_test_pairs": len(test_pairs),
        "n_points": n_points,
        "cd_mean": float(np.mean([r["cd"] for r in rows])),
        "emd_mean": float(np.mean([r["emd"] for r in rows])),
        "epc_mean": float(np.nanmean([r["epc"] for r in rows])),
        "per_pair": rows,
        "dataset_manifest_sha256": hashlib.sha256(
            (Path(dataset_dir) / "MANIFEST.json").read_bytes()
        ).hexdigest(),
        "dataset_config": data["manifest"]["config"],
    }

    if with_biometrics:
        report["biometrics"] = _biometric_tables(data, test_pairs, gens_world, seed, ransac)

    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "per_pair.csv", "w", encoding="utf-8") as fh:
        fh.write("pair,cd,emd,epc\n")
        for r in rows:
            fh.write(f"{r['pair']},{r['cd']:.8f},{r['emd']:.8f},{r['epc']:.8f}\n")
    return report


def _biometric_tables(data, test_pairs, gens_world, seed: int, ransac=None) -> dict:
    root = data["root"]
    als = io.read_ply(root / "scans" / "als.ply")
    tls = io.read_ply(root / "scans" / "tls.ply")
    boxes = [p.bbox for p in test_pairs]
    ground = biometrics.ground_model_for(geom.concat_clouds([als, tls]), cell=1.0)
    gen_cloud = PointCloud(np.vstack(gens_world))
    ransac = ransac or biometrics.RansacCircleConfig()
    sources = {
        "ALS": als,
        "TLS": tls,
        "ALS+TLS": geom.concat_clouds([als, tls]),
        "ALS+Gen": geom.concat_clouds([als, gen_cloud]),
    }
    records = {
        name: biometrics.plot_biometrics(
            cloud, boxes, name, ground=ground, ransac=ransac,
            seed=derive_seed(seed, "bio", name),
        )
        for name, cloud in sources.items()
    }
    table = biometrics.compare_sources(records, "ALS+TLS")
    serializable = {
        src: {
            metric: {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in cell.items()}
            for metric, cell in row.items()
        }
        for src, row in table.items()
    }
    return {"reference": "ALS+TLS", "wasserstein": serializable}
