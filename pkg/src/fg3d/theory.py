"""Exact verification of the soft-containment bound on finite discrete distributions.

For distributions p (data) and q (model) on a shared finite support, and a
per-outcome containment score f in [0, 1]:

    |E_p[f] - E_q[f]| <= TV(p, q) <= sqrt(KL(p||q) / 2)

so E_q[f] >= E_p[f] - sqrt(KL/2) (tight form). A looser form with the
constant sqrt(2 KL) is also reported; the tight form implies it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import metrics

SLACK = 1e-12


class SupportMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteDistribution:
    outcomes: tuple
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or len(probs) != len(self.outcomes):
            raise ValueError("one probability per outcome required")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {probs.sum()}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "outcomes", tuple(self.outcomes))


def _check_supports(p: DiscreteDistribution, q: DiscreteDistribution) -> None:
    if p.outcomes != q.outcomes:
        raise SupportMismatch("distributions must share one outcome set")


def tv_distance(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    _check_supports(p, q)
    return float(0.5 * np.abs(p.probs - q.probs).sum())


def kl_divergence(p: DiscreteDistribution, q: DiscreteDistribution) -> float:
    """KL(p || q) with the 0 log 0 convention; +inf when q misses p's support."""
    _check_supports(p, q)
    mask = p.probs > 0
    if np.any(q.probs[mask] == 0):
        return math.inf
    pp = p.probs[mask]
    return float(np.sum(pp * np.log(pp / q.probs[mask])))


@dataclass(frozen=True)
class ContainmentInstance:
    """Paired (data, model) distributions plus a per-outcome containment score."""

    p: DiscreteDistribution
    q: DiscreteDistribution
    f: np.ndarray

    def __post_init__(self):
        _check_supports(self.p, self.q)
        f = np.array(self.f, dtype=np.float64)
        if f.shape != self.p.probs.shape:
            raise ValueError("f must assign one score per outcome")
        if np.any((f < 0) | (f > 1)):
            raise ValueError("f must lie in [0, 1]")
        f.setflags(write=False)
        object.__setattr__(self, "f", f)

    @property
    def epsilon(self) -> float:
        return 1.0 - float(self.p.probs @ self.f)


@dataclass(frozen=True)
class BoundReport:
    e_p_f: float
    e_q_f: float
    tv: float
    kl: float
    bound_tight: float  # E_p[f] - sqrt(kl / 2)
    bound_loose: float  # 1 - eps - sqrt(2 kl), the weaker published-style constant
    holds_tight: bool
    holds_loose: bool
    kl_infinite: bool

    def to_dict(self) -> dict:
        return {
            "e_p_f": self.e_p_f,
            "e_q_f": self.e_q_f,
            "tv": self.tv,
            "kl": None if self.kl_infinite else self.kl,
            "bound_tight": None if self.kl_infinite else self.bound_tight,
            "bound_loose": None if self.kl_infinite else self.bound_loose,
            "holds_tight": self.holds_tight,
            "holds_loose": self.holds_loose,
            "kl_infinite": self.kl_infinite,
        }


def check_bound(instance: ContainmentInstance) -> BoundReport:
    """Evaluate both containment bounds for one instance.

    Infinite-KL instances make both bounds vacuous; they are reported as
    holding and flagged via kl_infinite.
    """
    e_p = float(instance.p.probs @ instance.f)
    e_q = float(instance.q.probs @ instance.f)
    tv = tv_distance(instance.p, instance.q)
    kl = kl_divergence(instance.p, instance.q)
    if math.isinf(kl):
        return BoundReport(e_p, e_q, tv, kl, -math.inf, -math.inf, True, True, True)
    bound_tight = e_p - math.sqrt(kl / 2.0)
    bound_loose = (1.0 - instance.epsilon) - math.sqrt(2.0 * kl)
    return BoundReport(
        e_p_f=e_p,
        e_q_f=e_q,
        tv=tv,
        kl=kl,
        bound_tight=bound_tight,
        bound_loose=bound_loose,
        holds_tight=e_q >= bound_tight - SLACK,
        holds_loose=e_q >= bound_loose - SLACK,
        kl_infinite=False,
    )


def random_instance(rng: np.random.Generator, support: int) -> ContainmentInstance:
    """Dirichlet-random (p, q) on a shared support with uniform-random f."""
    outcomes = tuple(range(support))
    p = DiscreteDistribution(outcomes, _renorm(rng.dirichlet(np.ones(support))))
    q = DiscreteDistribution(outcomes, _renorm(rng.dirichlet(np.ones(support))))
    return ContainmentInstance(p, q, rng.random(support))


def _renorm(probs: np.ndarray) -> np.ndarray:
    probs = np.clip(probs, 0.0, None)
    return probs / probs.sum()


def exhaustive_check(
    n_instances: int,
    seed: int,
    min_support: int = 2,
    max_support: int = 10,
    grid_points: int = 100,
) -> dict:
    """Monte-Carlo exhaustion of the bound chain plus a 2-outcome adversarial grid.

    Checks, for every instance: |E_p f - E_q f| <= TV <= sqrt(KL/2), the tight
    bound, and tight => loose. Returns a summary dict with violation counts.
    """
    rng = np.random.default_rng(seed)
    sizes = rng.integers(min_support, max_support + 1, size=n_instances)
    violations = {"expectation_vs_tv": 0, "pinsker": 0, "tight": 0, "implication": 0}
    n_infinite = 0
    max_gap_minus_tv = -math.inf
    max_tv_minus_pinsker = -math.inf
    for support in range(min_support, max_support + 1):
        count = int(np.sum(sizes == support))
        if count == 0:
            continue
        p = rng.dirichlet(np.ones(support), size=count)
        q = rng.dirichlet(np.ones(support), size=count)
        f = rng.random((count, support))
        p /= p.sum(axis=1, keepdims=True)
        q /= q.sum(axis=1, keepdims=True)
        gap = np.abs(np.sum(p * f, axis=1) - np.sum(q * f, axis=1))
        tv = 0.5 * np.abs(p - q).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p / q), 0.0)
        infinite = np.any((p > 0) & (q == 0), axis=1)
        kl = np.where(infinite, np.inf, terms.sum(axis=1))
        n_infinite += int(infinite.sum())
        pinsker = np.sqrt(np.maximum(kl, 0.0) / 2.0)
        violations["expectation_vs_tv"] += int(np.sum(gap > tv + SLACK))
        violations["pinsker"] += int(np.sum(tv > pinsker + SLACK))
        e_q = np.sum(q * f, axis=1)
        e_p = np.sum(p * f, axis=1)
        violations["tight"] += int(np.sum(e_q < e_p - pinsker - SLACK))
        loose = e_p - np.sqrt(2.0 * np.maximum(kl, 0.0))
        tight_holds = e_q >= e_p - pinsker - SLACK
        loose_holds = e_q >= loose - SLACK
        violations["implication"] += int(np.sum(tight_holds & ~loose_holds))
        max_gap_minus_tv = max(max_gap_minus_tv, float(np.max(gap - tv)))
        finite = ~infinite
        if np.any(finite):
            max_tv_minus_pinsker = max(
                max_tv_minus_pinsker, float(np.max(tv[finite] - pinsker[finite]))
            )
    grid = adversarial_grid_check(grid_points)
    return {
        "n_instances": int(n_instances),
        "n_kl_infinite": n_infinite,
        "violations": violations,
        "max_gap_minus_tv": max_gap_minus_tv,
        "max_tv_minus_pinsker": max_tv_minus_pinsker,
        "grid": grid,
        "all_hold": all(v == 0 for v in violations.values()) and grid["violations"] == 0,
    }


def adversarial_grid_check(n: int = 100) -> dict:
    """Grid search over 2-outcome (p, q) maximizing the expectation gap at fixed KL.

    With f = (1, 0) the gap equals |p1 - q1|, the worst case for bounded f,
    so the grid probes the bound chain where it is tightest.
    """
    eps = 1e-9
    a = np.linspace(eps, 1 - eps, n)
    b = np.linspace(eps, 1 - eps, n)
    pa, qb = np.meshgrid(a, b, indexing="ij")
    gap = np.abs(pa - qb)
    tv = np.abs(pa - qb)
    kl = pa * np.log(pa / qb) + (1 - pa) * np.log((1 - pa) / (1 - qb))
    pinsker = np.sqrt(np.maximum(kl, 0.0) / 2.0)
    violations = int(np.sum(gap > pinsker + SLACK))
    return {
        "grid_points": int(n * n),
        "violations": violations,
        "max_gap_minus_pinsker": float(np.max(gap - pinsker)),
    }


def empirical_containment_report(pairs) -> tuple[float, list[float]]:
    """Mean containment gap over TLS/ALS pairs: eps_hat = 1 - mean per-pair EPC.

    Pairs whose ALS cloud has no full-rank hull are skipped with a warning.
    """
    per_pair: list[float] = []
    skipped = 0
    for pair in pairs:
        try:
            per_pair.append(metrics.epc(pair.tls.points, pair.als.points))
        except metrics.DegenerateHull:
            skipped += 1
    if skipped:
        warnings.warn(f"skipped {skipped} pairs with degenerate ALS hulls", stacklevel=2)
    if not per_pair:
        raise ValueError("no pair admitted a containment measurement")
    return 1.0 - float(np.mean(per_pair)), per_pair
