import json
from pathlib import Path

import numpy as np
import pytest

from fg3d import diffusion, geom, io, nn, pipeline, scansim, synthforest
from fg3d.detect import DetectConfig
from fg3d.diffusion import TrainConfig
from fg3d.pipeline import GenConfig, RunConfig, SceneConfig, build_dataset, load_dataset

TINY_ARCH = nn.DenoiserConfig(
    cond_widths=(16, 24), d_c=12, point_width=16, time_dim=8, width=24, n_blocks=2
)


def tiny_config(seed=31, n_trees=10):
    return RunConfig(
        scene=SceneConfig(n_trees=n_trees, area_radius=22.0, min_spacing=7.0, cluster_fraction=0.0),
        train=TrainConfig(
            T=20, beta0=1e-3, betaT=0.2, batch_size=4, n_points=64, cond_points=64,
            iterations=200, seed=seed, arch=TINY_ARCH, checkpoint_every=100, val_pairs=2,
            val_points=64,
        ),
        gen=GenConfig(n_points=64, landscape_radius=22.0),
        master_seed=seed,
    )


@pytest.fixture(scope="module")
def built_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    config = tiny_config()
    manifest = build_dataset(config, out)
    return {"dir": out, "manifest": manifest, "config": config}


class TestRunConfig:
    def test_dict_round_trip(self):
        config = tiny_config()
        again = RunConfig.from_dict(config.to_dict())
        assert again == config

    def test_json_round_trip(self, tmp_path):
        config = tiny_config()
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config.to_dict()))
        assert RunConfig.from_json(path) == config

    def test_config_hash_stable(self):
        assert pipeline.config_hash(tiny_config()) == pipeline.config_hash(tiny_config())
        assert pipeline.config_hash(tiny_config(seed=32)) != pipeline.config_hash(tiny_config(seed=33))


class TestBuildDataset:
    def test_manifest_counts(self, built_dataset):
        manifest = built_dataset["manifest"]
        n = built_dataset["config"].scene.n_trees
        assert 0.6 * n <= manifest["n_pairs"] <= 1.2 * n
        assert manifest["split_counts"]["train"] >= 1
        assert 0.0 <= manifest["eps_hat_train"] <= 0.2

    def test_split_disjoint_by_tree_id(self, built_dataset):
        split_of = built_dataset["manifest"]["tree_split"]
        seen = {}
        for tree_id, split in split_of.items():
            assert seen.setdefault(tree_id, split) == split
        data = load_dataset(built_dataset["dir"])
        for split, pairs in data["splits"].items():
            for pair in pairs:
                votes = [split_of[str(t)] for t in pair.tree_ids]
                if votes and len(set(votes)) == 1:
                    assert votes[0] == split

    def test_artifacts_exist(self, built_dataset):
        root = Path(built_dataset["dir"])
        for rel in (
            "MANIFEST.json", "boxes.json", "scene/master.ply", "scene/params.json",
            "scene/ground.csv", "scans/als.ply", "scans/tls.ply", "scans/poses.csv",
        ):
            assert (root / rel).exists(), rel

    def test_load_round_trip(self, built_dataset):
        data = load_dataset(built_dataset["dir"])
        total = sum(len(v) for v in data["splits"].values())
        assert total == built_dataset["manifest"]["n_pairs"]
        pair = next(p for v in data["splits"].values() for p in v)
        assert len(pair.als) >= 32
        assert len(pair.tls) >= 32
        both = np.vstack([pair.als.points, pair.tls.points])
        assert both.min() > -1e-6 and both.max() < 1 + 1e-6

    def test_rebuild_is_byte_identical(self, built_dataset, tmp_path):
        again = tmp_path / "rebuild"
        build_dataset(built_dataset["config"], again)
        root = Path(built_dataset["dir"])
        for path in sorted(root.rglob("*")):
            if path.is_dir() or path.name == "timings.json":
                continue
            other = again / path.relative_to(root)
            assert other.exists(), path
            assert other.read_bytes() == path.read_bytes(), path


@pytest.fixture(scope="module")
def trained(built_dataset):
    data = load_dataset(built_dataset["dir"])
    cfg = built_dataset["config"].train
    weights, history = diffusion.train(
        data["splits"]["train"], cfg, data["splits"]["val"] or data["splits"]["train"][:2]
    )
    return {"weights": weights, "history": history, "data": data}


class TestEvaluateRun:
    def test_report_schema_and_round_trip(self, built_dataset, trained, tmp_path):
        report = pipeline.evaluate_run(
            built_dataset["dir"], trained["weights"], tmp_path, seed=3, n_points=64,
            with_biometrics=False,
        )
        on_disk = json.loads((tmp_path / "report.json").read_text())
        assert on_disk == json.loads(json.dumps(report))
        for key in ("cd_mean", "emd_mean", "epc_mean", "per_pair", "frame", "dataset_config"):
            assert key in on_disk
        assert on_disk["frame"] == "unit-cube"
        csv_lines = (tmp_path / "per_pair.csv").read_text().splitlines()
        assert csv_lines[0] == "pair,cd,emd,epc"
        assert len(csv_lines) == 1 + on_disk["n_test_pairs"]

    def test_untrained_worse_than_trained(self, built_dataset, trained, tmp_path):
        untrained = diffusion.init_weights(TINY_ARCH, seed=0)
        untrained.meta = dict(trained["weights"].meta)
        a = pipeline.evaluate_run(
            built_dataset["dir"], trained["weights"], tmp_path / "a", seed=3,
            n_points=64, with_biometrics=False,
        )
        b = pipeline.evaluate_run(
            built_dataset["dir"], untrained, tmp_path / "b", seed=3,
            n_points=64, with_biometrics=False,
        )
        assert a["cd_mean"] < b["cd_mean"]

    def test_biometric_tables_present(self, built_dataset, trained, tmp_path):
        report = pipeline.evaluate_run(
            built_dataset["dir"], trained["weights"], tmp_path, seed=5, n_points=64,
            with_biometrics=True,
        )
        table = report["biometrics"]["wasserstein"]
        assert report["biometrics"]["reference"] == "ALS+TLS"
        assert set(table).issuperset({"ALS", "TLS", "ALS+Gen"})
        for metric_cell in table["ALS"].values():
            assert {"wd", "n", "dropped", "ref_n", "ref_dropped"} <= set(metric_cell)


class TestGenerateLandscape:
    def test_flat_scene_unaltered(self, trained):
        rng = np.random.default_rng(0)
        n = 4000
        pts = np.column_stack(
            [rng.uniform(-15, 15, n), rng.uniform(-15, 15, n), rng.normal(0, 0.02, n)]
        )
        als = geom.PointCloud(pts, labels=np.zeros(n, dtype=np.int16))
        result = pipeline.generate_landscape(
            trained["weights"], als, GenConfig(n_points=64), DetectConfig(), seed=1
        )
        assert result.per_tree == ()
        assert result.summary["n_boxes"] == 0
        assert np.array_equal(result.merged.points, als.points)

    def test_landscape_structure(self, trained, built_dataset):
        scene = synthforest.generate_forest(
            5, area_radius=16.0, min_spacing=7.0, seed=97, cluster_fraction=0.0
        )
        als = scansim.simulate_als(scene, scansim.AlsSensor(), seed=3)
        result = pipeline.generate_landscape(
            trained["weights"], als, GenConfig(n_points=64), DetectConfig(), seed=2
        )
        assert result.summary["n_generated"] >= 3
        n_gen_points = sum(len(r.points_world) for r in result.per_tree)
        assert len(result.merged) == len(als) + n_gen_points
        for record in result.per_tree:
            assert record.points_world.shape[1] == 3
            assert record.wall_time >= 0.0

    def test_order_independent_merged_multiset(self, trained):
        scene = synthforest.generate_forest(
            4, area_radius=14.0, min_spacing=7.0, seed=55, cluster_fraction=0.0
        )
        als = scansim.simulate_als(scene, scansim.AlsSensor(), seed=9)
        a = pipeline.generate_landscape(
            trained["weights"], als, GenConfig(n_points=64), DetectConfig(), seed=4
        )
        b = pipeline.generate_landscape(
            trained["weights"], als, GenConfig(n_points=64), DetectConfig(), seed=4
        )
        sa = np.sort(a.merged.points.view([("x", float), ("y", float), ("z", float)]).ravel())
        sb = np.sort(b.merged.points.view([("x", float), ("y", float), ("z", float)]).ravel())
        assert np.array_equal(sa, sb)


class TestWorkerEnv:
    def test_fg3d_threads_controls_worker_count(self, monkeypatch):
        from fg3d._util import ordered_map, worker_count

        monkeypatch.setenv("FG3D_THREADS", "3")
        assert worker_count() == 3
        assert ordered_map(lambda x: x * 2, [1, 2, 3]) == [2, 4, 6]
        monkeypatch.setenv("FG3D_THREADS", "junk")
        assert worker_count() == 1
        monkeypatch.delenv("FG3D_THREADS")
        assert worker_count() == 1
