"""Reconstruction and containment metrics for point clouds.

All point-set metrics are computed in whatever frame the inputs share;
the evaluation pipeline always calls them in the pair's unit-cube frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geom
from .geom import DEFAULT_CONTAINMENT_TOL, ConvexHull3, SpatialIndex, _as_points


class EmptyCloud(ValueError):
    pass


class SizeMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class DegenerateHull(ValueError):
    """Conditioning cloud does not admit a full-rank convex hull."""


def chamfer(x, y) -> float:
    """Symmetric Chamfer distance: mean squared nearest-neighbor gap, both ways."""
    xp = _as_points(x)
    yp = _as_points(y)
    if len(xp) == 0 or len(yp) == 0:
        raise EmptyCloud("chamfer needs two nonempty clouds")
    d_xy, _ = SpatialIndex(yp).nearest(xp)
    d_yx, _ = SpatialIndex(xp).nearest(yp)
    return float(np.mean(d_xy**2) + np.mean(d_yx**2))


def emd_exact(x, y) -> float:
    """Mean matched distance under the exact optimal bijection (assignment solve)."""
    xp = _as_points(x)
    yp = _as_points(y)
    if len(xp) == 0 or len(yp) == 0:
        raise EmptyCloud("emd needs two nonempty clouds")
    if len(xp) != len(yp):
        raise SizeMismatch(f"emd needs equal sizes, got {len(xp)} vs {len(yp)}")
    cost = np.linalg.norm(xp[:, None, :] - yp[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def _hull_of(als) -> ConvexHull3:
    if isinstance(als, ConvexHull3):
        return als
    try:
        return geom.build_convex_hull(als)
    except geom.DegenerateInput as exc:
        raise DegenerateHull(str(exc)) from exc


def epc(gen, als, tol: float = DEFAULT_CONTAINMENT_TOL) -> float:
    """Fraction of generated points inside the convex envelope of the ALS cloud."""
    gp = _as_points(gen)
    if len(gp) == 0:
        raise EmptyCloud("epc needs a nonempty generated cloud")
    hull = _hull_of(als)
    return float(np.mean(hull.contains_many(gp, tol)))


@dataclass(frozen=True)
class DeviationStats:
    """Out-of-envelope summary for one generated cloud against one ALS hull."""

    n_generated: int
    out_fraction: float
    mean_out_dist: float
    std_out_dist: float
    out_distances: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.out_distances, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "out_distances", arr)

    def to_dict(self) -> dict:
        return {
            "n_generated": self.n_generated,
            "out_fraction": self.out_fraction,
            "mean": self.mean_out_dist,
            "std": self.std_out_dist,
        }


def deviation_stats(gen, als, tol: float = DEFAULT_CONTAINMENT_TOL) -> DeviationStats:
    """Partition gen by containment and summarize surface distances of the outsiders."""
    gp = _as_points(gen)
    if len(gp) == 0:
        raise EmptyCloud("deviation stats need a nonempty generated cloud")
    hull = _hull_of(als)
    inside = hull.contains_many(gp, tol)
    outside_pts = gp[~inside]
    dists = np.array(
        [geom.distance_to_hull_surface(hull, p) for p in outside_pts], dtype=np.float64
    )
    return DeviationStats(
        n_generated=len(gp),
        out_fraction=len(dists) / len(gp),
        mean_out_dist=float(dists.mean()) if len(dists) else 0.0,
        std_out_dist=float(dists.std()) if len(dists) else 0.0,
        out_distances=dists,
    )


def wasserstein_1d(a, b) -> float:
    """Empirical 1-Wasserstein distance between two samples of reals.

    Equal sizes reduce to the mean absolute difference of sorted samples;
    unequal sizes integrate |F_a^-1 - F_b^-1| over the merged quantile grid.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("wasserstein_1d needs two nonempty samples")
    a = np.sort(a)
    b = np.sort(b)
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    qa = np.arange(1, len(a) + 1) / len(a)
    qb = np.arange(1, len(b) + 1) / len(b)
    grid = np.union1d(qa, qb)
    widths = np.diff(np.concatenate(([0.0], grid)))
    ia = np.minimum(np.searchsorted(qa, grid - 1e-15), len(a) - 1)
    ib = np.minimum(np.searchsorted(qb, grid - 1e-15), len(b) - 1)
    return float(np.sum(widths * np.abs(a[ia] - b[ib])))
