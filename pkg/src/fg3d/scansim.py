"""Virtual ALS and TLS sensors over labeled scenes, plus tree-pair extraction.

Occlusion is modeled statistically on a voxelized occupancy grid rather than
by exact surface ray tracing: ALS rays descend voxel columns with a Bernoulli
penetration per occupied voxel, TLS rays march from the scanner and stop at
the first occupied voxel. Both sensors are bitwise deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .detect import BBox3, crop
from .geom import PointCloud, UnitCubeTransform
from .synthforest import LabeledScene
from ._util import derive_seed

ALS_OCCLUSION_VOXEL = 0.25  # meters; statistical occlusion resolution for ALS

_SHIFT = 1 << 20  # voxel index offset so packed keys stay positive


@dataclass(frozen=True)
class AlsSensor:
    point_density: float = 15.0  # rays per square meter
    max_returns_per_column: int = 8
    canopy_penetration_prob: float = 0.3
    noise_sigma: float = 0.03  # bottom of the airborne RMSE range

    def __post_init__(self):
        if not self.point_density > 0:
            raise ValueError("point_density must be positive")
        if not 0.0 <= self.canopy_penetration_prob <= 1.0:
            raise ValueError("canopy_penetration_prob must be in [0, 1]")


@dataclass(frozen=True)
class TlsSensor:
    max_range: float = 25.0
    angular_step: float = 0.012  # radians
    scanner_height: float = 1.5
    occlusion_voxel: float = 0.15
    noise_sigma: float = 0.01
    elevation_min: float = -0.6
    elevation_max: float = 1.25

    def __post_init__(self):
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if not self.angular_step > 0:
            raise ValueError("angular_step must be positive")


@dataclass(frozen=True)
class TreePair:
    """Co-registered (ALS, TLS) crops of one tree/cluster in a shared unit frame."""

    als: PointCloud
    tls: PointCloud
    transform: UnitCubeTransform
    bbox: BBox3
    tree_ids: frozenset = field(default_factory=frozenset)


def _pack(ix, iy, iz):
    return (
        ((ix.astype(np.int64) + _SHIFT) << 42)
        | ((iy.astype(np.int64) + _SHIFT) << 21)
        | (iz.astype(np.int64) + _SHIFT)
    )


class _Occupancy:
    """CSR-style voxel occupancy: sorted packed keys with per-voxel point lists."""

    def __init__(self, points: np.ndarray, voxel: float):
        self.voxel = float(voxel)
        idx = np.floor(points / voxel).astype(np.int64)
        keys = _pack(idx[:, 0], idx[:, 1], idx[:, 2])
        order = np.argsort(keys, kind="stable")
        keys_sorted = keys[order]
        new = np.empty(len(keys_sorted), dtype=bool)
        if len(keys_sorted):
            new[0] = True
            new[1:] = keys_sorted[1:] != keys_sorted[:-1]
        self.point_order = order
        self.voxel_keys = keys_sorted[new]
        self.voxel_starts = np.flatnonzero(new)
        self.voxel_counts = np.diff(np.append(self.voxel_starts, len(keys_sorted)))

    def occupied(self, keys: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.voxel_keys, keys)
        pos = np.minimum(pos, len(self.voxel_keys) - 1)
        return self.voxel_keys[pos] == keys

    def voxel_index(self, keys: np.ndarray) -> np.ndarray:
        """Index of each key in the voxel table (caller guarantees occupancy)."""
        return np.searchsorted(self.voxel_keys, keys)

    def pick_points(self, voxel_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One uniformly random member point index per listed voxel."""
        offsets = rng.integers(0, self.voxel_counts[voxel_ids])
        return self.point_order[self.voxel_starts[voxel_ids] + offsets]


def simulate_als(scene: LabeledScene, sensor: AlsSensor, seed: int) -> PointCloud:
    """Vertical-ray sampling on a jittered grid with Bernoulli canopy penetration."""
    pts = scene.cloud.points
    if len(pts) == 0:
        raise ValueError("scene cloud is empty")
    rng = np.random.default_rng(derive_seed(seed, "als"))
    occ = _Occupancy(pts, ALS_OCCLUSION_VOXEL)

    # Column table: occupied voxels grouped by (ix, iy), sorted top-down in z.
    idx = np.floor(pts[occ.point_order[occ.voxel_starts]] / occ.voxel).astype(np.int64)
    col_keys_all = ((idx[:, 0] + _SHIFT) << 21) | (idx[:, 1] + _SHIFT)
    col_order = np.lexsort((-idx[:, 2], col_keys_all))
    col_sorted = col_keys_all[col_order]
    new_col = np.empty(len(col_sorted), dtype=bool)
    new_col[0] = True
    new_col[1:] = col_sorted[1:] != col_sorted[:-1]
    col_keys = col_sorted[new_col]
    col_starts = np.flatnonzero(new_col)
    col_counts = np.diff(np.append(col_starts, len(col_sorted)))

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    spacing = 1.0 / np.sqrt(sensor.point_density)
    xs = np.arange(lo[0], hi[0] + spacing, spacing)
    ys = np.arange(lo[1], hi[1] + spacing, spacing)
    gx, gy = np.meshgrid(xs, ys)
    rays = np.column_stack([gx.ravel(), gy.ravel()])
    rays = rays + rng.uniform(-spacing / 2.0, spacing / 2.0, rays.shape)

    ray_cols = np.floor(rays / occ.voxel).astype(np.int64)
    ray_keys = ((ray_cols[:, 0] + _SHIFT) << 21) | (ray_cols[:, 1] + _SHIFT)
    pos = np.searchsorted(col_keys, ray_keys)
    pos = np.minimum(pos, len(col_keys) - 1)
    hit_col = col_keys[pos] == ray_keys
    pos = pos[hit_col]
    stack_len = col_counts[pos]

    # Returns per ray: first hit always, then a geometric number of deeper hits.
    p = sensor.canopy_penetration_prob
    u = rng.random(len(pos))
    if p <= 0.0:
        extra = np.zeros(len(pos), dtype=np.int64)
    elif p >= 1.0:
        extra = np.full(len(pos), np.iinfo(np.int64).max // 2, dtype=np.int64)
    else:
        extra = np.floor(np.log(u) / np.log(p)).astype(np.int64)
    n_returns = np.minimum(np.minimum(extra + 1, stack_len), sensor.max_returns_per_column)

    total = int(n_returns.sum())
    if total == 0:
        raise ValueError("no returns; scene and sensor grid do not overlap")
    ray_rep = np.repeat(np.arange(len(pos)), n_returns)
    depth = np.arange(total) - np.repeat(np.cumsum(n_returns) - n_returns, n_returns)
    voxel_rows = col_starts[pos][ray_rep] + depth  # rows into col_order
    voxel_ids = col_order[voxel_rows]
    chosen = occ.pick_points(voxel_ids, rng)

    returns = pts[chosen] + rng.normal(0.0, sensor.noise_sigma, (total, 3))
    labels = None if scene.cloud.labels is None else scene.cloud.labels[chosen]
    owners = None if scene.cloud.owners is None else scene.cloud.owners[chosen]
    return PointCloud(returns, labels, owners)


def simulate_tls(
    scene: LabeledScene, poses, sensor: TlsSensor, seed: int
) -> PointCloud:
    """First-hit spherical ray casting from each pose; hits beyond range discarded."""
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 2)
    if len(poses) == 0:
        raise ValueError("at least one pose required")
    pts = scene.cloud.points
    occ = _Occupancy(pts, sensor.occlusion_voxel)
    zmin, zmax = pts[:, 2].min() - 1.0, pts[:, 2].max() + 1.0

    az = np.arange(0.0, 2.0 * np.pi, sensor.angular_step)
    el = np.arange(sensor.elevation_min, sensor.elevation_max, sensor.angular_step)
    aa, ee = np.meshgrid(az, el)
    dirs = np.column_stack(
        [
            (np.cos(aa) * np.cos(ee)).ravel(),
            (np.sin(aa) * np.cos(ee)).ravel(),
            np.sin(ee).ravel(),
        ]
    )

    step = 0.45 * sensor.occlusion_voxel
    n_steps = int(np.ceil(sensor.max_range / step))

    all_chosen: list[np.ndarray] = []
    rng = np.random.default_rng(derive_seed(seed, "tls"))
    for pose_i, (px, py) in enumerate(poses):
        origin = np.array([px, py, float(scene.ground.elevation(px, py)) + sensor.scanner_height])
        active = np.ones(len(dirs), dtype=bool)
        hit_voxel = np.full(len(dirs), -1, dtype=np.int64)
        for k in range(1, n_steps + 1):
            s = k * step
            if not active.any():
                break
            cur = np.flatnonzero(active)
            p = origin + dirs[cur] * s
            out = (p[:, 2] < zmin) | (p[:, 2] > zmax)
            if s > 2.0 and out.any():
                active[cur[out]] = False
                keep = ~out
                cur = cur[keep]
                p = p[keep]
            if len(cur) == 0:
                continue
            keys = _pack(*(np.floor(p / occ.voxel).astype(np.int64).T))
            hits = occ.occupied(keys)
            if hits.any():
                hit_rays = cur[hits]
                hit_voxel[hit_rays] = occ.voxel_index(keys[hits])
                active[hit_rays] = False
        hit_rays = np.flatnonzero(hit_voxel >= 0)
        if len(hit_rays) == 0:
            continue
        chosen = occ.pick_points(hit_voxel[hit_rays], rng)
        # Range gate on the actual point, not the voxel entry position.
        within = np.linalg.norm(pts[chosen] - origin, axis=1) <= sensor.max_range
        all_chosen.append(chosen[within])

    if not all_chosen:
        raise ValueError("no TLS returns within range")
    chosen = np.concatenate(all_chosen)
    returns = pts[chosen] + rng.normal(0.0, sensor.noise_sigma, (len(chosen), 3))
    labels = None if scene.cloud.labels is None else scene.cloud.labels[chosen]
    owners = None if scene.cloud.owners is None else scene.cloud.owners[chosen]
    return PointCloud(returns, labels, owners)


def apply_rigid_jitter(
    cloud: PointCloud, sigma_t: float, sigma_theta: float, seed: int
) -> PointCloud:
    """Co-registration error model: one global z-rotation + translation draw."""
    rng = np.random.default_rng(derive_seed(seed, "jitter"))
    theta = rng.normal(0.0, sigma_theta)
    shift = rng.normal(0.0, sigma_t, 3)
    center = cloud.points.mean(axis=0)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    moved = (cloud.points - center) @ rot.T + center + shift
    return cloud.with_points(moved)


def extract_pairs(
    scene: LabeledScene,
    als: PointCloud,
    tls: PointCloud,
    boxes,
    *,
    tls_voxel: float = 0.10,
    min_points: int = 32,
) -> tuple[list[TreePair], list[dict]]:
    """Crop both clouds per box, downsample TLS, and normalize to a joint frame.

    Returns (pairs, skip_log); a pair is dropped when either side ends up with
    fewer than min_points points after preprocessing.
    """
    pairs: list[TreePair] = []
    skipped: list[dict] = []
    for box_i, box in enumerate(boxes):
        als_crop = crop(als, box)
        tls_crop = crop(tls, box)
        if len(tls_crop) > 0:
            tls_crop = geom.voxel_downsample(tls_crop, tls_voxel)
        if len(als_crop) < min_points or len(tls_crop) < min_points:
            skipped.append(
                {"box": box_i, "n_als": len(als_crop), "n_tls": len(tls_crop), "reason": "too few points"}
            )
            continue
        union = np.vstack([als_crop.points, tls_crop.points])
        try:
            _, transform = geom.normalize_unit_cube(PointCloud(union))
        except geom.ZeroExtent:
            skipped.append({"box": box_i, "reason": "zero extent"})
            continue
        ids: set[int] = set()
        for part in (als_crop, tls_crop):
            if part.owners is not None:
                ids.update(int(v) for v in np.unique(part.owners) if v >= 0)
        pairs.append(
            TreePair(
                als=transform.apply_cloud(als_crop),
                tls=transform.apply_cloud(tls_crop),
                transform=transform,
                bbox=box,
                tree_ids=frozenset(ids),
            )
        )
    return pairs, skipped
