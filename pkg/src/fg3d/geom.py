"""Point-cloud value types, convex envelopes, spatial indexing, and preprocessing.

All values are immutable after construction and every operation is a pure
function, so everything here is safe to share across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull as _QhullHull
from scipy.spatial import QhullError, cKDTree

DEFAULT_CONTAINMENT_TOL = 1e-6  # meters; absorbs facet floating-point noise


class SemanticLabel(enum.IntEnum):
    GROUND = 0
    STEM = 1
    BRANCH = 2
    FOLIAGE = 3
    LOW_VEG = 4


class DegenerateInput(ValueError):
    """Fewer than 4 points, or all points coplanar/collinear."""


class ZeroExtent(ValueError):
    """All points coincide; no normalization scale exists."""


class PointInside(ValueError):
    """Surface distance requested for a point already inside the hull."""


def _as_points(obj) -> np.ndarray:
    pts = obj.points if isinstance(obj, PointCloud) else np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points in meters with optional per-point labels and owner ids.

    labels are SemanticLabel values; owners are tree indices (-1 for ground
    and unowned vegetation). Arrays are copied and frozen on construction.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    owners: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain NaN or Inf")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        for name, dtype in (("labels", np.int16), ("owners", np.int32)):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.array(arr, dtype=dtype)
            if arr.shape != (len(pts),):
                raise ValueError(f"{name} must have one entry per point")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.points)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ValueError("empty cloud has no bounds")
        return self.points.min(axis=0), self.points.max(axis=0)

    def take(self, index) -> "PointCloud":
        """New cloud restricted to the given indices / boolean mask."""
        return PointCloud(
            self.points[index],
            None if self.labels is None else self.labels[index],
            None if self.owners is None else self.owners[index],
        )

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same labels/owners, replaced coordinates (shape must match)."""
        if len(points) != len(self):
            raise ValueError("replacement points must match cloud length")
        return PointCloud(points, self.labels, self.owners)


def concat_clouds(clouds) -> PointCloud:
    """Concatenate clouds; labels/owners survive only if present on every part."""
    clouds = [c for c in clouds if len(c) > 0]
    if not clouds:
        raise ValueError("nothing to concatenate")
    pts = np.concatenate([c.points for c in clouds])
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    owners = None
    if all(c.owners is not None for c in clouds):
        owners = np.concatenate([c.owners for c in clouds])
    return PointCloud(pts, labels, owners)


@dataclass(frozen=True)
class UnitCubeTransform:
    """Uniform scale + translation mapping a cloud into [0, 1]^3.

    apply(p) = (p + translation) * scale; invert reverses it exactly.
    """

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation

    def apply_cloud(self, cloud: PointCloud) -> PointCloud:
        return cloud.with_points(self.apply(cloud.points))

    def invert_cloud(self, cloud: PointCloud) -> PointCloud:
        return cloud.with_points(self.invert(cloud.points))

    def to_dict(self) -> dict:
        return {"translation": [float(v) for v in self.translation], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "UnitCubeTransform":
        return cls(np.asarray(d["translation"], dtype=np.float64), float(d["scale"]))


@dataclass(frozen=True)
class GroundModel:
    """Gridded ground elevation with bilinear queries, clamped at the edges."""

    origin: np.ndarray  # (x0, y0) of cell-center (0, 0)
    cell: float
    values: np.ndarray  # (ny, nx) elevations in meters

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(2)
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("values must be a 2D grid")
        if not self.cell > 0:
            raise ValueError("cell must be positive")
        origin.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "values", values)

    def elevation(self, x, y):
        """Bilinear ground elevation at (x, y); accepts scalars or arrays."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ny, nx = self.values.shape
        gx = np.clip((x - self.origin[0]) / self.cell, 0.0, nx - 1.0)
        gy = np.clip((y - self.origin[1]) / self.cell, 0.0, ny - 1.0)
        ix = np.clip(np.floor(gx).astype(np.int64), 0, max(nx - 2, 0))
        iy = np.clip(np.floor(gy).astype(np.int64), 0, max(ny - 2, 0))
        fx = gx - ix
        fy = gy - iy
        ix1 = np.minimum(ix + 1, nx - 1)
        iy1 = np.minimum(iy + 1, ny - 1)
        v = self.values
        top = v[iy, ix] * (1 - fx) + v[iy, ix1] * fx
        bot = v[iy1, ix] * (1 - fx) + v[iy1, ix1] * fx
        return top * (1 - fy) + bot * fy


class SpatialIndex:
    """Balanced k-d tree over a cloud; nearest() matches an exhaustive scan."""

    def __init__(self, cloud):
        self._points = _as_points(cloud)
        if len(self._points) == 0:
            raise ValueError("cannot index an empty cloud")
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest indexed point per query."""
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64))
        return np.atleast_1d(d), np.atleast_1d(i)


# ---------------------------------------------------------------------------
# Convex envelope
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvexHull3:
    """Facet-based convex envelope: triangles with outward unit normals.

    A point p is inside iff dot(normal_f, p) <= offset_f + tol for every facet f.
    """

    vertices: np.ndarray  # (V, 3), a subset of the input points
    facets: np.ndarray  # (F, 3) indices into vertices
    normals: np.ndarray  # (F, 3) outward unit normals
    offsets: np.ndarray  # (F,) plane offsets
    volume: float

    def __post_init__(self):
        for name in ("vertices", "facets", "normals", "offsets"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def contains_many(self, points: np.ndarray, tol: float = DEFAULT_CONTAINMENT_TOL) -> np.ndarray:
        """Boolean mask of half-space membership for each query point."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        slack = pts @ self.normals.T - self.offsets[None, :]
        return np.all(slack <= tol, axis=1)

    def facet_triangles(self) -> np.ndarray:
        """(F, 3, 3) vertex coordinates per facet."""
        return self.vertices[self.facets]


def contains(hull: ConvexHull3, p, tol: float = DEFAULT_CONTAINMENT_TOL) -> bool:
    """Inclusive membership test against every facet half-space."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    return bool(hull.contains_many(np.asarray(p, dtype=np.float64), tol)[0])


def _rank(points: np.ndarray) -> int:
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] <= 0:
        return 0
    return int(np.sum(s > 1e-12 * s[0] * max(points.shape)))


def build_convex_hull(cloud) -> ConvexHull3:
    """Convex hull of a cloud; raises DegenerateInput for rank-deficient input."""
    pts = _as_points(cloud)
    if len(pts) < 4:
        raise DegenerateInput(f"need >= 4 points, got {len(pts)}")
    if _rank(pts) < 3:
        raise DegenerateInput("points are coplanar or collinear")
    try:
        qh = _QhullHull(pts)
    except QhullError:
        # Near-degenerate but full-rank input: joggle into general position.
        try:
            qh = _QhullHull(pts, qhull_options="QJ")
        except QhullError as exc:
            raise DegenerateInput(f"hull construction failed: {exc}") from exc
    vert_index = qh.vertices  # indices into pts
    local = np.full(len(pts), -1, dtype=np.int64)
    local[vert_index] = np.arange(len(vert_index))
    facets = local[qh.simplices]
    normals = qh.equations[:, :3].astype(np.float64)
    offsets = (-qh.equations[:, 3]).astype(np.float64)
    return ConvexHull3(
        vertices=pts[vert_index].copy(),
        facets=facets,
        normals=normals,
        offsets=offsets,
        volume=float(qh.volume),
    )


def _point_segment_dist(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from p to segments a->b, vectorized over the leading axis."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", p[None, :] - a, ab)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(denom > 0, t / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    foot = a + t[:, None] * ab
    return np.linalg.norm(p[None, :] - foot, axis=1)


def distance_to_hull_surface(hull: ConvexHull3, p) -> float:
    """Minimum Euclidean distance from an outside point to the hull surface.

    Per facet the distance is the plane distance when the orthogonal foot
    falls inside the triangle, else the nearest edge-segment distance.
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    if contains(hull, p, 0.0):
        raise PointInside("point is inside the hull")
    tri = hull.facet_triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = hull.normals
    plane_d = p @ n.T - hull.offsets
    foot = p[None, :] - plane_d[:, None] * n
    # Barycentric inside test for the foot point.
    v0 = b - a
    v1 = c - a
    v2 = foot - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    denom = d00 * d11 - d01 * d01
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(denom != 0, (d11 * d20 - d01 * d21) / denom, -1.0)
        w = np.where(denom != 0, (d00 * d21 - d01 * d20) / denom, -1.0)
    u = 1.0 - v - w
    inside = (u >= -1e-12) & (v >= -1e-12) & (w >= -1e-12)
    dists = np.min(
        np.stack(
            [
                _point_segment_dist(p, a, b),
                _point_segment_dist(p, b, c),
                _point_segment_dist(p, c, a),
            ]
        ),
        axis=0,
    )
    dists = np.where(inside, np.minimum(dists, np.abs(plane_d)), dists)
    return float(dists.min())


# ---------------------------------------------------------------------------
# Preprocessing transforms
# ---------------------------------------------------------------------------


def _majority_per_group(group_starts: np.ndarray, sorted_values: np.ndarray) -> np.ndarray:
    """Per-group majority of already group-sorted values; ties -> smallest value."""
    n = len(sorted_values)
    boundaries = np.zeros(n, dtype=bool)
    boundaries[group_starts] = True
    value_change = np.empty(n, dtype=bool)
    value_change[0] = True
    value_change[1:] = sorted_values[1:] != sorted_values[:-1]
    run_starts = np.flatnonzero(boundaries | value_change)
    run_lengths = np.diff(np.append(run_starts, n))
    run_group = np.searchsorted(group_starts, run_starts, side="right") - 1
    order = np.lexsort((sorted_values[run_starts], -run_lengths, run_group))
    first_run_of_group = np.searchsorted(run_group[order], np.arange(len(group_starts)))
    return sorted_values[run_starts[order[first_run_of_group]]]


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One centroid per occupied voxel; labels and owners resolved by majority."""
    if not voxel > 0:
        raise ValueError("voxel must be positive")
    if len(cloud) == 0:
        return cloud
    idx = np.floor(cloud.points / voxel).astype(np.int64)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx_s = idx[order]
    pts_s = cloud.points[order]
    new_group = np.empty(len(idx_s), dtype=bool)
    new_group[0] = True
    new_group[1:] = np.any(idx_s[1:] != idx_s[:-1], axis=1)
    starts = np.flatnonzero(new_group)
    counts = np.diff(np.append(starts, len(idx_s)))
    centroids = np.add.reduceat(pts_s, starts, axis=0) / counts[:, None]

    def resolve(values):
        if values is None:
            return None
        vals_s = values[order]
        # majority needs values sorted within each group
        within = np.lexsort((vals_s, np.repeat(np.arange(len(starts)), counts)))
        return _majority_per_group(starts, vals_s[within]).astype(values.dtype)

    return PointCloud(centroids, resolve(cloud.labels), resolve(cloud.owners))


def normalize_unit_cube(cloud: PointCloud) -> tuple[PointCloud, UnitCubeTransform]:
    """Scale uniformly so the longest axis spans [0, 1]; center shorter axes."""
    if len(cloud) == 0:
        raise ValueError("cannot normalize an empty cloud")
    lo, hi = cloud.bounds()
    extent = hi - lo
    longest = float(extent.max())
    if longest <= 0:
        raise ZeroExtent("all points coincide")
    scale = 1.0 / longest
    # apply(p) = (p + T) * s must equal (p - lo) * s + 0.5 * (1 - extent * s)
    translation = -lo + 0.5 * (1.0 / scale - extent)
    transform = UnitCubeTransform(translation, scale)
    return transform.apply_cloud(cloud), transform


def subsample_fixed(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Exactly n points, uniform without replacement when possible; seeded."""
    if len(cloud) == 0:
        raise ValueError("cannot subsample an empty cloud")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    replace = len(cloud) < n
    idx = rng.choice(len(cloud), size=n, replace=replace)
    return cloud.take(idx)
