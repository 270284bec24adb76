"""Per-tree biophysical metrics and plot-level distribution comparison.

Height, DBH, crown diameter, and crown volume per detected tree, computed
either from semantic labels when present or from a deterministic geometric
proxy segmentation. Distribution differences across sensing sources are
summarized with the 1D Wasserstein distance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .detect import BBox3, crop
from .geom import GroundModel, PointCloud, SemanticLabel
from .metrics import wasserstein_1d
from ._util import derive_seed

METRIC_NAMES = ("height", "dbh", "crd", "crv")


class TooFewPoints(ValueError):
    pass


def estimate_ground(cloud: PointCloud, cell: float = 1.0) -> GroundModel:
    """Gridded 5th-percentile z per cell; holes filled from the nearest occupied cell."""
    if len(cloud) == 0:
        raise ValueError("cannot estimate ground from an empty cloud")
    lo, hi = cloud.bounds()
    nx = int(np.floor((hi[0] - lo[0]) / cell)) + 1
    ny = int(np.floor((hi[1] - lo[1]) / cell)) + 1
    ix = np.minimum(((cloud.points[:, 0] - lo[0]) / cell).astype(np.int64), nx - 1)
    iy = np.minimum(((cloud.points[:, 1] - lo[1]) / cell).astype(np.int64), ny - 1)
    flat = iy * nx + ix
    order = np.argsort(flat, kind="stable")
    flat_s = flat[order]
    z_s = cloud.points[order, 2]
    new = np.empty(len(flat_s), dtype=bool)
    new[0] = True
    new[1:] = flat_s[1:] != flat_s[:-1]
    starts = np.flatnonzero(new)
    counts = np.diff(np.append(starts, len(flat_s)))
    values = np.full(nx * ny, np.nan)
    for s, c in zip(starts, counts):
        values[flat_s[s]] = np.percentile(z_s[s : s + c], 5.0)
    values = values.reshape(ny, nx)
    missing = np.isnan(values)
    if missing.any():
        occ_y, occ_x = np.nonzero(~missing)
        mis_y, mis_x = np.nonzero(missing)
        tree = geom.SpatialIndex(
            np.column_stack([occ_x, occ_y, np.zeros(len(occ_x))]).astype(np.float64)
        )
        _, nearest = tree.nearest(
            np.column_stack([mis_x, mis_y, np.zeros(len(mis_x))]).astype(np.float64)
        )
        values[mis_y, mis_x] = values[occ_y[nearest], occ_x[nearest]]
    # grid origin at cell centers
    origin = np.array([lo[0] + cell / 2.0, lo[1] + cell / 2.0])
    return GroundModel(origin, cell, values)


def ground_model_for(cloud: PointCloud, cell: float = 1.0) -> GroundModel:
    """Ground model from the Ground-labeled subset when labels exist.

    Falls back to the all-points percentile estimate for unlabeled clouds.
    """
    if cloud.labels is not None:
        ground_pts = cloud.take(cloud.labels == SemanticLabel.GROUND)
        if len(ground_pts) >= 16:
            return estimate_ground(ground_pts, cell=cell)
    return estimate_ground(cloud, cell=cell)


def tree_height(cloud: PointCloud, ground: GroundModel) -> float:
    """Max elevation minus the ground projection at that point's (x, y)."""
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    top = cloud.points[np.argmax(cloud.points[:, 2])]
    return max(0.0, float(top[2] - ground.elevation(top[0], top[1])))


@dataclass(frozen=True)
class RansacCircleConfig:
    breast_height: float = 1.37
    slice_half_width: float = 0.05
    slice_heights: tuple = (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7)
    iterations: int = 500
    inlier_tol: float = 0.03
    min_inliers: int = 10
    max_radius: float = 1.5  # reject hypothesis circles larger than any stem


def _circle_from_3(p1, p2, p3):
    """Circumcircle of three 2D points; None when nearly collinear."""
    ax, ay = p1
    bx, by = p2
    cx, cy = p3
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-12:
        return None
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
    r = math.hypot(ax - ux, ay - uy)
    return ux, uy, r


def _least_squares_circle(xy: np.ndarray):
    """Algebraic (Kasa) circle fit."""
    a = np.column_stack([2.0 * xy[:, 0], 2.0 * xy[:, 1], np.ones(len(xy))])
    b = (xy**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    cx, cy, c = sol
    r2 = c + cx**2 + cy**2
    if r2 <= 0:
        return None
    return float(cx), float(cy), float(math.sqrt(r2))


def _ransac_circle(xy: np.ndarray, cfg: RansacCircleConfig, rng: np.random.Generator):
    """Best circle by inlier count over 3-point hypotheses, refit on inliers."""
    best_count = 0
    best_inliers = None
    for _ in range(cfg.iterations):
        pick = rng.choice(len(xy), size=3, replace=False)
        circle = _circle_from_3(xy[pick[0]], xy[pick[1]], xy[pick[2]])
        if circle is None or circle[2] > cfg.max_radius:
            continue
        cx, cy, r = circle
        resid = np.abs(np.hypot(xy[:, 0] - cx, xy[:, 1] - cy) - r)
        inliers = resid <= cfg.inlier_tol
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < cfg.min_inliers:
        return None
    refit = _least_squares_circle(xy[best_inliers])
    if refit is None or refit[2] > cfg.max_radius:
        return None
    cx, cy, r = refit
    # The algebraic fit sees E[rho^2] = r^2 + 2 sigma^2; remove the noise bias
    # using the inlier radial residual variance as the sigma^2 estimate.
    resid = np.hypot(xy[best_inliers, 0] - cx, xy[best_inliers, 1] - cy) - r
    r = float(np.sqrt(max(r * r - 2.0 * float(np.var(resid)), 0.25 * r * r)))
    return cx, cy, r


def dbh_ransac(
    cloud: PointCloud,
    ground: GroundModel,
    cfg: RansacCircleConfig = RansacCircleConfig(),
    seed: int = 0,
) -> float | None:
    """Stem diameter at breast height from RANSAC circles fitted along the stem.

    Circles are fitted at each configured height above local ground; the radius
    profile is interpolated linearly and evaluated at breast height. Returns
    None (missing) when fewer than two slices accept a circle.
    """
    if len(cloud) == 0:
        return None
    rng = np.random.default_rng(derive_seed(seed, "dbh"))
    z_agl = cloud.points[:, 2] - ground.elevation(cloud.points[:, 0], cloud.points[:, 1])
    accepted_h = []
    accepted_r = []
    for h in cfg.slice_heights:
        band = np.abs(z_agl - h) <= cfg.slice_half_width
        if band.sum() < max(3, cfg.min_inliers):
            continue
        circle = _ransac_circle(cloud.points[band][:, :2], cfg, rng)
        if circle is None:
            continue
        accepted_h.append(h)
        accepted_r.append(circle[2])
    if len(accepted_h) < 2:
        return None
    coeffs = np.polyfit(accepted_h, accepted_r, deg=1)
    radius = float(np.polyval(coeffs, cfg.breast_height))
    if radius <= 0:
        return None
    return 2.0 * radius


def _cross2(u: np.ndarray, v: np.ndarray) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def _hull_2d(xy: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counterclockwise, no collinear vertices."""
    pts = np.unique(xy, axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(points):
        chain: list[np.ndarray] = []
        for p in points:
            while len(chain) >= 2 and _cross2(chain[-1] - chain[-2], p - chain[-2]) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    return np.asarray(lower[:-1] + upper[:-1])


def _calipers_diameter(hull: np.ndarray) -> float:
    """Rotating-calipers maximum pairwise distance over a convex polygon."""
    n = len(hull)
    if n == 1:
        return 0.0
    if n == 2:
        return float(np.linalg.norm(hull[0] - hull[1]))

    def area2(a, b, c):
        return abs(_cross2(b - a, c - a))

    best = 0.0
    k = 1
    for i in range(n):
        j = (i + 1) % n
        while area2(hull[i], hull[j], hull[(k + 1) % n]) > area2(hull[i], hull[j], hull[k]):
            k = (k + 1) % n
        best = max(
            best,
            float(np.linalg.norm(hull[i] - hull[k])),
            float(np.linalg.norm(hull[j] - hull[k])),
        )
    return best


def crown_diameter(foliage: PointCloud) -> float:
    """Maximum pairwise plan-view distance of the foliage points."""
    if len(foliage) < 2:
        raise TooFewPoints("crown diameter needs at least 2 points")
    return _calipers_diameter(_hull_2d(foliage.points[:, :2]))


def _kmeans(points: np.ndarray, k: int, seed: int, iterations: int = 50) -> np.ndarray:
    """Plain k-means with k-means++ seeding; returns final nearest-center labels."""
    rng = np.random.default_rng(derive_seed(seed, "kmeans"))
    k = min(k, len(points))
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(0, len(points))]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = points[rng.integers(0, len(points), size=k - j)]
            break
        pick = min(int(np.searchsorted(np.cumsum(d2), rng.random() * total)), len(points) - 1)
        centers[j] = points[pick]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    assign = np.zeros(len(points), dtype=np.int64)
    for _ in range(iterations):
        dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        new_assign = np.argmin(dists, axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
    return np.argmin(dists, axis=1)


def crown_volume(foliage: PointCloud, k: int = 5, seed: int = 0) -> float:
    """Sum of per-cluster convex hull volumes over a k-means partition."""
    if len(foliage) < 4:
        raise TooFewPoints("crown volume needs at least 4 points")
    if k < 1:
        raise ValueError("k must be >= 1")
    assign = _kmeans(foliage.points, k, seed)
    total = 0.0
    for j in np.unique(assign):
        members = foliage.points[assign == j]
        if len(members) < 4:
            continue
        try:
            total += geom.build_convex_hull(members).volume
        except geom.DegenerateInput:
            continue
    return total


@dataclass(frozen=True)
class BiometricRecord:
    tree_id: int
    source: str  # ALS | TLS | ALS+TLS | ALS+Gen
    height: float | None
    dbh: float | None
    crown_diameter: float | None
    crown_volume: float | None

    def metric(self, name: str) -> float | None:
        return {
            "height": self.height,
            "dbh": self.dbh,
            "crd": self.crown_diameter,
            "crv": self.crown_volume,
        }[name]


@dataclass(frozen=True)
class SegmentationConfig:
    """Geometric proxy segmentation used when semantic labels are absent."""

    ground_band: float = 0.3  # meters above ground counted as ground
    stem_axis_radius: float = 0.5
    histogram_bin: float = 0.25
    density_break: float = 1.5  # crown starts where bin density exceeds this x stem zone


def _proxy_segments(points: np.ndarray, z_agl: np.ndarray, cfg: SegmentationConfig):
    """(ground_mask, stem_mask, foliage_mask) from heights and a stem axis guess."""
    ground_mask = z_agl <= cfg.ground_band
    above = ~ground_mask
    if not above.any():
        return ground_mask, np.zeros_like(ground_mask), np.zeros_like(ground_mask)
    z_above = z_agl[above]
    z_max = float(z_above.max())
    bins = np.arange(cfg.ground_band, max(z_max, cfg.ground_band + 1.0) + cfg.histogram_bin, cfg.histogram_bin)
    counts, edges = np.histogram(z_above, bins=bins)
    stem_zone = counts[: max(1, int(2.0 / cfg.histogram_bin))]
    baseline = max(1.0, float(np.median(stem_zone)))
    crown_base = 0.3 * z_max
    for count, lo_edge in zip(counts, edges[:-1]):
        if lo_edge < 1.0:
            continue
        if count > cfg.density_break * baseline:
            crown_base = lo_edge
            break
    below_crown = above & (z_agl < crown_base)
    if below_crown.any():
        axis = np.median(points[below_crown, :2], axis=0)
    else:
        axis = np.median(points[:, :2], axis=0)
    near_axis = np.hypot(points[:, 0] - axis[0], points[:, 1] - axis[1]) <= cfg.stem_axis_radius
    stem_mask = above & (z_agl < crown_base) & near_axis
    foliage_mask = above & (z_agl >= crown_base)
    return ground_mask, stem_mask, foliage_mask


def plot_biometrics(
    cloud: PointCloud,
    boxes,
    source: str,
    ground: GroundModel | None = None,
    ransac: RansacCircleConfig = RansacCircleConfig(),
    segmentation: SegmentationConfig = SegmentationConfig(),
    crown_k: int = 5,
    seed: int = 0,
) -> list[BiometricRecord]:
    """One record per box; absent evidence yields missing (None) fields."""
    if ground is None and len(cloud):
        ground = ground_model_for(cloud, cell=1.0)
    records: list[BiometricRecord] = []
    for i, box in enumerate(boxes):
        tree = crop(cloud, box)
        if len(tree) == 0:
            records.append(BiometricRecord(i, source, None, None, None, None))
            continue
        height = tree_height(tree, ground)
        if tree.labels is not None:
            stem = tree.take(tree.labels == SemanticLabel.STEM)
            foliage = tree.take(tree.labels == SemanticLabel.FOLIAGE)
        else:
            z_agl = tree.points[:, 2] - ground.elevation(tree.points[:, 0], tree.points[:, 1])
            _, stem_mask, foliage_mask = _proxy_segments(tree.points, z_agl, segmentation)
            stem = tree.take(stem_mask)
            foliage = tree.take(foliage_mask)
        dbh = dbh_ransac(stem, ground, ransac, seed=derive_seed(seed, "box", i))
        crd = None
        crv = None
        if len(foliage) >= 2:
            crd = crown_diameter(foliage)
        if len(foliage) >= 4:
            try:
                crv = crown_volume(foliage, k=crown_k, seed=derive_seed(seed, "crv", i))
            except TooFewPoints:
                crv = None
        records.append(
            BiometricRecord(
                i,
                source,
                height if height > 0 else None,
                dbh,
                crd if crd and crd > 0 else None,
                crv if crv and crv > 0 else None,
            )
        )
    return records


def compare_sources(records_by_source: dict, reference: str) -> dict:
    """Per-metric Wasserstein distance of each source against the reference.

    Missing values are dropped (counts reported); a comparison against an
    empty value list is reported as infinite distance.
    """
    if reference not in records_by_source:
        raise KeyError(f"reference source {reference!r} missing")

    def values(records, name):
        vals = [r.metric(name) for r in records]
        present = [v for v in vals if v is not None]
        return present, len(vals) - len(present)

    table: dict = {}
    ref_records = records_by_source[reference]
    for source, records in records_by_source.items():
        if source == reference:
            continue
        table[source] = {}
        for name in METRIC_NAMES:
            vals, dropped = values(records, name)
            ref_vals, ref_dropped = values(ref_records, name)
            if not vals or not ref_vals:
                wd = math.inf
            else:
                wd = wasserstein_1d(vals, ref_vals)
            table[source][name] = {
                "wd": wd,
                "n": len(vals),
                "dropped": dropped,
                "ref_n": len(ref_vals),
                "ref_dropped": ref_dropped,
            }
    return table


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tree_id", "source", "height_m", "dbh_m", "crd_m", "crv_m3"])
        for r in records:
            writer.writerow(
                [
                    r.tree_id,
                    r.source,
                    *("" if v is None else f"{v:.6f}" for v in (r.height, r.dbh, r.crown_diameter, r.crown_volume)),
                ]
            )


def read_records_csv(path) -> list[BiometricRecord]:
    records = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            tree_id, source, *vals = row
            parsed = [float(v) if v else None for v in vals]
            records.append(BiometricRecord(int(tree_id), source, *parsed))
    return records
