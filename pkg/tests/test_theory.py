import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fg3d import theory
from fg3d.theory import (
    BoundReport,
    ContainmentInstance,
    DiscreteDistribution,
    SupportMismatch,
    check_bound,
    kl_divergence,
    random_instance,
    tv_distance,
)


def dist(*probs):
    return DiscreteDistribution(tuple(range(len(probs))), np.array(probs))


class TestDiscreteDistribution:
    def test_must_sum_to_one(self):
        with pytest.raises(ValueError):
            dist(0.5, 0.4)

    def test_no_negative_mass(self):
        with pytest.raises(ValueError):
            dist(1.2, -0.2)


class TestTvDistance:
    def test_identical(self):
        assert tv_distance(dist(0.3, 0.7), dist(0.3, 0.7)) == 0.0

    def test_disjoint(self):
        assert tv_distance(dist(1.0, 0.0), dist(0.0, 1.0)) == 1.0

    def test_direct_sum(self):
        assert tv_distance(dist(0.7, 0.3), dist(0.4, 0.6)) == pytest.approx(0.3)

    def test_support_mismatch(self):
        p = dist(0.5, 0.5)
        q = DiscreteDistribution(("a", "b"), np.array([0.5, 0.5]))
        with pytest.raises(SupportMismatch):
            tv_distance(p, q)


class TestKlDivergence:
    def test_identical(self):
        assert kl_divergence(dist(0.2, 0.8), dist(0.2, 0.8)) == 0.0

    def test_single_term_collapse(self):
        assert kl_divergence(dist(1.0, 0.0), dist(0.5, 0.5)) == pytest.approx(math.log(2))

    def test_direct_evaluation(self):
        expected = 0.7 * math.log(0.7 / 0.4) + 0.3 * math.log(0.3 / 0.6)
        assert kl_divergence(dist(0.7, 0.3), dist(0.4, 0.6)) == pytest.approx(expected)
        assert expected == pytest.approx(0.18379, abs=1e-5)

    def test_infinite_when_q_misses_support(self):
        assert math.isinf(kl_divergence(dist(0.5, 0.5), dist(1.0, 0.0)))


class TestCheckBound:
    def test_p_equals_q(self, rng):
        p = dist(0.25, 0.35, 0.4)
        f = rng.random(3)
        report = check_bound(ContainmentInstance(p, p, f))
        assert report.tv == 0.0
        assert report.kl == 0.0
        instance = ContainmentInstance(p, p, f)
        assert report.e_q_f == pytest.approx(1.0 - instance.epsilon, abs=1e-15)
        assert report.holds_tight and report.holds_loose

    def test_adversarial_two_outcome_grid(self):
        # worst-case f = (1, 0) makes the expectation gap equal |p1 - q1|
        grid = theory.adversarial_grid_check(100)
        assert grid["grid_points"] == 10_000
        assert grid["violations"] == 0

    def test_random_instances_tight_bound(self, rng):
        for _ in range(500):
            inst = random_instance(rng, int(rng.integers(2, 11)))
            report = check_bound(inst)
            gap = abs(report.e_p_f - report.e_q_f)
            assert gap <= report.tv + theory.SLACK
            if not report.kl_infinite:
                assert report.tv <= math.sqrt(report.kl / 2.0) + theory.SLACK
            assert report.holds_tight
            assert report.holds_loose  # tight implies loose

    def test_infinite_kl_flagged_vacuous(self):
        p = dist(0.5, 0.5)
        q = dist(1.0, 0.0)
        report = check_bound(ContainmentInstance(p, q, np.array([0.2, 0.9])))
        assert report.kl_infinite
        assert report.holds_tight and report.holds_loose

    def test_f_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            ContainmentInstance(dist(0.5, 0.5), dist(0.5, 0.5), np.array([0.5, 1.5]))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50)
    def test_bound_chain_property(self, seed):
        r = np.random.default_rng(seed)
        inst = random_instance(r, int(r.integers(2, 8)))
        report = check_bound(inst)
        if not report.kl_infinite:
            assert abs(report.e_p_f - report.e_q_f) <= math.sqrt(report.kl / 2.0) + theory.SLACK
            assert report.bound_loose <= report.bound_tight + theory.SLACK


class TestExhaustiveCheck:
    def test_small_run_all_hold(self):
        report = theory.exhaustive_check(5000, seed=7)
        assert report["all_hold"]
        assert all(v == 0 for v in report["violations"].values())

    def test_reports_counts(self):
        report = theory.exhaustive_check(1000, seed=1)
        assert report["n_instances"] == 1000
        assert report["grid"]["grid_points"] == 10_000


class TestEmpiricalContainmentReport:
    def test_fully_contained_pairs(self, rng):
        from fg3d.geom import PointCloud
        from fg3d.scansim import TreePair
        from fg3d.detect import BBox3
        from fg3d.geom import UnitCubeTransform

        cube = np.array([[x, y, z] for x in (0.0, 1) for y in (0.0, 1) for z in (0.0, 1)])
        pairs = []
        for _ in range(3):
            tls = rng.uniform(0.2, 0.8, (50, 3))
            pairs.append(
                TreePair(
                    als=PointCloud(cube),
                    tls=PointCloud(tls),
                    transform=UnitCubeTransform(np.zeros(3), 1.0),
                    bbox=BBox3(np.zeros(3), np.ones(3)),
                )
            )
        eps_hat, per_pair = theory.empirical_containment_report(pairs)
        assert eps_hat == pytest.approx(0.0)
        assert per_pair == [1.0, 1.0, 1.0]

    def test_synthetic_corpus_range(self, scanned_scene):
        eps_hat, _ = theory.empirical_containment_report(scanned_scene["pairs"])
        assert 0.0 < eps_hat <= 0.10
