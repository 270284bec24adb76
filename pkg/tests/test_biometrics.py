import math

import numpy as np
import pytest

from fg3d import biometrics, geom, synthforest
from fg3d.biometrics import (
    BiometricRecord,
    RansacCircleConfig,
    TooFewPoints,
    compare_sources,
    crown_diameter,
    crown_volume,
    dbh_ransac,
    estimate_ground,
    plot_biometrics,
    read_records_csv,
    tree_height,
    write_records_csv,
)
from fg3d.detect import BBox3
from fg3d.geom import GroundModel, PointCloud, SemanticLabel

CUBE = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])


def cylinder_cloud(radius=0.15, height=3.0, n=4000, noise=0.0, seed=0, center=(0.0, 0.0)):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(0, height, n)
    pts = np.column_stack(
        [center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta), z]
    )
    if noise:
        pts = pts + rng.normal(0, noise, pts.shape)
    return PointCloud(pts)


def flat_ground(value=0.0):
    return GroundModel(np.array([-100.0, -100.0]), 100.0, np.full((3, 3), value))


class TestEstimateGround:
    def test_flat_cloud(self, rng):
        pts = np.column_stack(
            [rng.uniform(0, 20, 2000), rng.uniform(0, 20, 2000), rng.normal(0, 0.02, 2000)]
        )
        ground = estimate_ground(PointCloud(pts), cell=1.0)
        assert np.abs(ground.values).max() < 0.1

    def test_sinusoidal_ground(self, rng):
        n = 40000
        x = rng.uniform(0, 40, n)
        y = rng.uniform(0, 40, n)
        z = 0.5 * np.sin(2 * np.pi * x / 25.0) + rng.normal(0, 0.02, n)
        ground = estimate_ground(PointCloud(np.column_stack([x, y, z])), cell=1.0)
        qx = rng.uniform(2, 38, 200)
        qy = rng.uniform(2, 38, 200)
        got = ground.elevation(qx, qy)
        expected = 0.5 * np.sin(2 * np.pi * qx / 25.0)
        assert np.abs(got - expected).max() < 0.15

    def test_percentile_rejects_canopy(self):
        params = synthforest.TreeParams(12.0, 0.3, 0.3, 2.0, 6, 25.0, 0.8)
        tree = synthforest.generate_tree(params, seed=7)
        ground = estimate_ground(tree, cell=1.0)
        assert abs(float(ground.elevation(0.0, 0.0))) < 0.1


class TestTreeHeight:
    def test_single_point(self):
        cloud = PointCloud([[0.0, 0.0, 5.0]])
        assert tree_height(cloud, flat_ground()) == pytest.approx(5.0)

    def test_planted_height(self):
        params = synthforest.TreeParams(10.0, 0.3, 0.35, 2.0, 6, 25.0, 0.8)
        tree = synthforest.generate_tree(params, seed=3)
        ground = estimate_ground(tree, cell=1.0)
        assert tree_height(tree, ground) == pytest.approx(10.0, abs=0.1)

    def test_elevated_terrain(self):
        params = synthforest.TreeParams(10.0, 0.3, 0.35, 2.0, 6, 25.0, 0.8)
        tree = synthforest.generate_tree(params, seed=3)
        shifted = PointCloud(tree.points + np.array([0, 0, 2.0]), tree.labels)
        ground = estimate_ground(shifted, cell=1.0)
        assert tree_height(shifted, ground) == pytest.approx(10.0, abs=0.12)


class TestDbhRansac:
    def test_clean_cylinder(self):
        cloud = cylinder_cloud(radius=0.15, noise=0.0, seed=1)
        dbh = dbh_ransac(cloud, flat_ground(), seed=2)
        assert dbh == pytest.approx(0.30, rel=0.02)

    def test_noisy_cylinder(self):
        cloud = cylinder_cloud(radius=0.15, noise=0.02, seed=3)
        dbh = dbh_ransac(cloud, flat_ground(), seed=4)
        assert dbh == pytest.approx(0.30, rel=0.02)

    def test_cylinder_with_clutter(self, rng):
        clean = cylinder_cloud(radius=0.15, noise=0.01, seed=5)
        n_clutter = int(0.2 * len(clean))
        clutter = np.column_stack(
            [
                rng.uniform(-0.6, 0.6, n_clutter),
                rng.uniform(-0.6, 0.6, n_clutter),
                rng.uniform(0, 3.0, n_clutter),
            ]
        )
        cloud = PointCloud(np.vstack([clean.points, clutter]))
        dbh = dbh_ransac(cloud, flat_ground(), seed=6)
        assert dbh == pytest.approx(0.30, rel=0.05)

    def test_tapered_stem(self):
        params = synthforest.TreeParams(12.0, 0.32, 0.4, 2.0, 0, 1e-9, 1.0)
        tree = synthforest.generate_tree(
            params, seed=8, noise_sigma=0.01, stem_density=3000.0, ground_disk=False
        )
        stem = tree.take(tree.labels == SemanticLabel.STEM)
        expected = 2.0 * params.stem_radius(1.37)
        dbh = dbh_ransac(stem, flat_ground(), seed=9)
        assert dbh == pytest.approx(expected, rel=0.03)

    def test_missing_when_insufficient(self):
        sparse = PointCloud(np.random.default_rng(0).normal(0, 1, (8, 3)))
        assert dbh_ransac(sparse, flat_ground(), seed=0) is None

    def test_any_seed_recovers_clean_cylinder(self):
        cloud = cylinder_cloud(radius=0.2, noise=0.0, seed=11)
        for seed in range(5):
            dbh = dbh_ransac(cloud, flat_ground(), seed=seed)
            assert dbh == pytest.approx(0.40, rel=0.02)


class TestCrownDiameter:
    def test_two_points(self):
        cloud = PointCloud([[0.0, 0.0, 5.0], [3.0, 4.0, 6.0]])
        assert crown_diameter(cloud) == pytest.approx(5.0)

    def test_square_diagonal(self):
        square = PointCloud([[0.0, 0, 5], [4.0, 0, 5], [4.0, 4, 5], [0.0, 4, 5]])
        assert crown_diameter(square) == pytest.approx(4 * math.sqrt(2))

    def test_matches_bruteforce(self, rng):
        pts = rng.normal(0, 2, (500, 3))
        cloud = PointCloud(pts)
        got = crown_diameter(cloud)
        xy = pts[:, :2]
        d2 = np.sum((xy[:, None, :] - xy[None, :, :]) ** 2, axis=2)
        assert got == pytest.approx(math.sqrt(d2.max()), abs=1e-12)

    def test_dominates_subsets(self, rng):
        pts = rng.normal(0, 2, (100, 3))
        cloud = PointCloud(pts)
        full = crown_diameter(cloud)
        for _ in range(5):
            idx = rng.choice(100, 40, replace=False)
            assert crown_diameter(cloud.take(idx)) <= full + 1e-12

    def test_too_few(self):
        with pytest.raises(TooFewPoints):
            crown_diameter(PointCloud([[0.0, 0, 0]]))


class TestCrownVolume:
    def test_k1_unit_cube(self):
        assert crown_volume(PointCloud(CUBE), k=1, seed=0) == pytest.approx(1.0)

    def test_k1_equals_hull_volume(self, rng):
        pts = rng.normal(0, 2, (200, 3))
        vol = crown_volume(PointCloud(pts), k=1, seed=1)
        assert vol == pytest.approx(geom.build_convex_hull(pts).volume, rel=1e-12)

    def test_two_separated_cubes(self, rng):
        jitter = rng.uniform(0, 1, (60, 3))
        far = jitter + np.array([10.0, 0, 0])
        both = np.vstack([CUBE, jitter, CUBE + np.array([10.0, 0, 0]), far])
        vol = crown_volume(PointCloud(both), k=2, seed=2)
        assert vol == pytest.approx(2.0, abs=1e-9)

    def test_subadditive_in_k(self, rng):
        for trial in range(20):
            pts = np.random.default_rng(trial).normal(0, 1.5, (150, 3))
            cloud = PointCloud(pts)
            v1 = crown_volume(cloud, k=1, seed=3)
            v4 = crown_volume(cloud, k=4, seed=3)
            assert v4 <= v1 + 1e-9


class TestPlotBiometrics:
    def test_empty_boxes(self, small_scene):
        assert plot_biometrics(small_scene.cloud, [], "TLS") == []

    def test_labeled_plot_heights(self, small_scene):
        boxes = []
        for params, (bx, by) in small_scene.trees:
            r = params.crown_radius + 0.5
            boxes.append(
                BBox3((bx - r, by - r, -2.0), (bx + r, by + r, params.height + 2.0))
            )
        records = plot_biometrics(small_scene.cloud, boxes, "ALS+TLS")
        assert len(records) == len(small_scene.trees)
        for record, (params, _) in zip(records, small_scene.trees):
            assert record.height is not None
            planted = params.height
            assert abs(record.height - planted) / planted < 0.01

    def test_als_only_dbh_mostly_missing(self, scanned_scene):
        records = plot_biometrics(
            scanned_scene["als"], scanned_scene["boxes"], "ALS", ground=scanned_scene["ground"]
        )
        missing = sum(1 for r in records if r.dbh is None)
        assert missing >= 0.5 * len(records)

    def test_translation_invariance(self):
        params = synthforest.TreeParams(9.0, 0.3, 0.35, 1.8, 5, 25.0, 0.7)
        tree = synthforest.generate_tree(params, seed=13)
        shift = np.array([25.0, -12.0, 0.0])
        moved = PointCloud(tree.points + shift, tree.labels)
        box_a = BBox3((-3, -3, -1), (3, 3, 11))
        box_b = BBox3(box_a.mins + shift, box_a.maxs + shift)
        rec_a = plot_biometrics(tree, [box_a], "TLS", seed=1)[0]
        rec_b = plot_biometrics(moved, [box_b], "TLS", seed=1)[0]
        assert rec_a.height == pytest.approx(rec_b.height, abs=0.05)
        assert rec_a.crown_diameter == pytest.approx(rec_b.crown_diameter, abs=0.05)


class TestCompareSources:
    def make_records(self, source, heights, dbhs):
        return [
            BiometricRecord(i, source, h, d, 4.0, 12.0)
            for i, (h, d) in enumerate(zip(heights, dbhs))
        ]

    def test_identical_sources_zero(self):
        ref = self.make_records("ALS+TLS", [10, 12, 14], [0.3, 0.4, 0.5])
        other = self.make_records("TLS", [10, 12, 14], [0.3, 0.4, 0.5])
        table = compare_sources({"ALS+TLS": ref, "TLS": other}, "ALS+TLS")
        assert table["TLS"]["height"]["wd"] == pytest.approx(0.0)
        assert table["TLS"]["dbh"]["wd"] == pytest.approx(0.0)

    def test_shifted_heights(self):
        ref = self.make_records("ALS+TLS", [10, 12, 14], [0.3, 0.4, 0.5])
        other = self.make_records("ALS", [11, 13, 15], [0.3, 0.4, 0.5])
        table = compare_sources({"ALS+TLS": ref, "ALS": other}, "ALS+TLS")
        assert table["ALS"]["height"]["wd"] == pytest.approx(1.0)

    def test_missing_dropped_and_counted(self):
        ref = self.make_records("ALS+TLS", [10, 12], [0.3, 0.4])
        other = self.make_records("ALS", [10, 12], [None, None])
        table = compare_sources({"ALS+TLS": ref, "ALS": other}, "ALS+TLS")
        assert math.isinf(table["ALS"]["dbh"]["wd"])
        assert table["ALS"]["dbh"]["dropped"] == 2

    def test_missing_reference_raises(self):
        with pytest.raises(KeyError):
            compare_sources({"A": []}, "B")


class TestRecordsCsv:
    def test_round_trip(self, tmp_path):
        records = [
            BiometricRecord(0, "TLS", 10.5, 0.32, 3.3, 14.0),
            BiometricRecord(1, "TLS", 8.0, None, None, 5.5),
        ]
        path = tmp_path / "records.csv"
        write_records_csv(path, records)
        back = read_records_csv(path)
        assert back[0].dbh == pytest.approx(0.32)
        assert back[1].dbh is None
        assert back[1].crown_diameter is None
        header = path.read_text().splitlines()[0]
        assert header == "tree_id,source,height_m,dbh_m,crd_m,crv_m3"
