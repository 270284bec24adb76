"""Bird's-eye tree detection: canopy height model, local-maxima seeds, region growing.

The 2D footprint of each grown region becomes a 3D box spanning the lowest to
the highest point inside that footprint.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom import GroundModel, PointCloud


@dataclass(frozen=True)
class BBox3:
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        mins = np.array(self.mins, dtype=np.float64).reshape(3)
        maxs = np.array(self.maxs, dtype=np.float64).reshape(3)
        if np.any(mins > maxs):
            raise ValueError("box min corner exceeds max corner")
        mins.setflags(write=False)
        maxs.setflags(write=False)
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)

    def footprint_area(self) -> float:
        return float((self.maxs[0] - self.mins[0]) * (self.maxs[1] - self.mins[1]))

    def contains_xy(self, x: float, y: float) -> bool:
        return bool(
            self.mins[0] <= x <= self.maxs[0] and self.mins[1] <= y <= self.maxs[1]
        )

    def inflated(self, fraction: float) -> "BBox3":
        half = (self.maxs - self.mins) / 2.0
        center = (self.maxs + self.mins) / 2.0
        return BBox3(center - half * (1 + fraction), center + half * (1 + fraction))

    def to_dict(self) -> dict:
        return {"min": [float(v) for v in self.mins], "max": [float(v) for v in self.maxs]}

    @classmethod
    def from_dict(cls, d: dict) -> "BBox3":
        return cls(np.asarray(d["min"]), np.asarray(d["max"]))


@dataclass(frozen=True)
class ChmGrid:
    """Canopy height above ground per cell; empty cells carry height 0 and a flag."""

    origin: np.ndarray  # (x0, y0) of cell (0, 0)'s min corner
    cell: float
    heights: np.ndarray  # (ny, nx)
    occupied: np.ndarray  # (ny, nx) bool

    def __post_init__(self):
        for name in ("origin", "heights", "occupied"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class DetectConfig:
    cell: float = 0.5
    min_height: float = 2.0
    smooth_radius: int = 1  # mean-filter radius in cells
    min_footprint: int = 4  # cells
    descent_frac: float = 0.2
    min_seed_separation: float = 2.5  # meters; suppress weaker maxima closer than this
    box_margin_xy: float = 0.8  # lateral pad so boxes keep a ground ring around the crown

    def __post_init__(self):
        if not self.min_height > 0:
            raise ValueError("min_height must be positive")
        if not self.cell > 0:
            raise ValueError("cell must be positive")


def rasterize_chm(cloud: PointCloud, cell: float, ground: GroundModel) -> ChmGrid:
    """Max height above ground per occupied cell, queried at cell centers."""
    if not cell > 0:
        raise ValueError("cell must be positive")
    if len(cloud) == 0:
        return ChmGrid(np.zeros(2), cell, np.zeros((1, 1)), np.zeros((1, 1), dtype=bool))
    lo, hi = cloud.bounds()
    origin = lo[:2]
    nx = int(np.floor((hi[0] - lo[0]) / cell)) + 1
    ny = int(np.floor((hi[1] - lo[1]) / cell)) + 1
    ix = np.minimum(((cloud.points[:, 0] - origin[0]) / cell).astype(np.int64), nx - 1)
    iy = np.minimum(((cloud.points[:, 1] - origin[1]) / cell).astype(np.int64), ny - 1)
    flat = iy * nx + ix
    max_z = np.full(nx * ny, -np.inf)
    np.maximum.at(max_z, flat, cloud.points[:, 2])
    occupied = np.isfinite(max_z).reshape(ny, nx)
    cx = origin[0] + (np.arange(nx) + 0.5) * cell
    cy = origin[1] + (np.arange(ny) + 0.5) * cell
    gxx, gyy = np.meshgrid(cx, cy)
    ground_z = ground.elevation(gxx.ravel(), gyy.ravel()).reshape(ny, nx)
    heights = np.where(occupied, max_z.reshape(ny, nx) - ground_z, 0.0)
    heights = np.clip(heights, 0.0, None)
    return ChmGrid(origin.copy(), cell, heights, occupied)


def _local_maxima(smooth: np.ndarray, occupied: np.ndarray, min_height: float) -> list[tuple[int, int]]:
    ny, nx = smooth.shape
    padded = np.full((ny + 2, nx + 2), -np.inf)
    padded[1:-1, 1:-1] = smooth
    center = padded[1:-1, 1:-1]
    is_max = np.ones_like(center, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_max &= center > padded[1 + dy : 1 + dy + ny, 1 + dx : 1 + dx + nx]
    is_max &= occupied & (center >= min_height)
    ys, xs = np.nonzero(is_max)
    order = np.lexsort((xs, ys, -center[ys, xs]))  # tallest seeds claim first
    return [(int(ys[i]), int(xs[i])) for i in order]


def detect_trees(
    cloud: PointCloud, cfg: DetectConfig = DetectConfig(), ground: GroundModel | None = None
) -> list[BBox3]:
    """Detect trees as grown CHM regions; boxes sorted by footprint area descending."""
    if len(cloud) == 0:
        return []
    if ground is None:
        from .biometrics import ground_model_for

        ground = ground_model_for(cloud, cell=max(1.0, 2 * cfg.cell))
    chm = rasterize_chm(cloud, cfg.cell, ground)
    size = 2 * cfg.smooth_radius + 1
    smooth = ndimage.uniform_filter(chm.heights, size=size, mode="constant") if size > 1 else chm.heights
    seeds = _local_maxima(smooth, chm.occupied, cfg.min_height)
    # greedy non-max suppression: taller seeds silence near neighbors
    if cfg.min_seed_separation > 0 and seeds:
        sep_cells = cfg.min_seed_separation / cfg.cell
        kept: list[tuple[int, int]] = []
        for sy, sx in seeds:  # already sorted tallest first
            if all(np.hypot(sy - ky, sx - kx) >= sep_cells for ky, kx in kept):
                kept.append((sy, sx))
        seeds = kept
    if not seeds:
        return []

    ny, nx = smooth.shape
    owner = np.full((ny, nx), -1, dtype=np.int64)
    heap: list[tuple[float, int, int, int]] = []
    for si, (sy, sx) in enumerate(seeds):
        heapq.heappush(heap, (0.0, si, sy, sx))
    seed_vals = np.array([smooth[sy, sx] for sy, sx in seeds])
    while heap:
        dist, si, cy, cx = heapq.heappop(heap)
        if owner[cy, cx] >= 0:
            continue
        owner[cy, cx] = si
        sy, sx = seeds[si]
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                y, x = cy + dy, cx + dx
                if not (0 <= y < ny and 0 <= x < nx):
                    continue
                if owner[y, x] >= 0 or not chm.occupied[y, x]:
                    continue
                if smooth[y, x] < cfg.descent_frac * seed_vals[si]:
                    continue
                d = float(np.hypot(y - sy, x - sx))
                heapq.heappush(heap, (d, si, y, x))

    # Per-point region membership via the owner grid.
    ix = np.minimum(((cloud.points[:, 0] - chm.origin[0]) / cfg.cell).astype(np.int64), nx - 1)
    iy = np.minimum(((cloud.points[:, 1] - chm.origin[1]) / cfg.cell).astype(np.int64), ny - 1)
    ix = np.maximum(ix, 0)
    iy = np.maximum(iy, 0)
    point_owner = owner[iy, ix]

    boxes: list[BBox3] = []
    for si in range(len(seeds)):
        cells_y, cells_x = np.nonzero(owner == si)
        if len(cells_y) < cfg.min_footprint:
            continue
        member = point_owner == si
        if not member.any():
            continue
        x_lo = chm.origin[0] + cells_x.min() * cfg.cell - cfg.box_margin_xy
        x_hi = chm.origin[0] + (cells_x.max() + 1) * cfg.cell + cfg.box_margin_xy
        y_lo = chm.origin[1] + cells_y.min() * cfg.cell - cfg.box_margin_xy
        y_hi = chm.origin[1] + (cells_y.max() + 1) * cfg.cell + cfg.box_margin_xy
        # top of canopy from the region's own points; lowest ground from the
        # padded footprint so the surrounding ground ring is kept
        z_hi = float(cloud.points[member, 2].max())
        inside = (
            (cloud.points[:, 0] >= x_lo)
            & (cloud.points[:, 0] <= x_hi)
            & (cloud.points[:, 1] >= y_lo)
            & (cloud.points[:, 1] <= y_hi)
        )
        z_lo = float(cloud.points[inside, 2].min())
        if z_hi - z_lo < cfg.min_height:
            continue
        boxes.append(BBox3((x_lo, y_lo, z_lo), (x_hi, y_hi, z_hi)))
    boxes.sort(key=lambda b: -b.footprint_area())
    return boxes


def crop(cloud: PointCloud, box: BBox3) -> PointCloud:
    """Points with min <= p <= max componentwise, inclusive; labels/owners kept."""
    mask = np.all((cloud.points >= box.mins) & (cloud.points <= box.maxs), axis=1)
    return cloud.take(mask)


def save_boxes(path, boxes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([b.to_dict() for b in boxes], fh, indent=2, sort_keys=True)


def load_boxes(path) -> list[BBox3]:
    with open(path, "r", encoding="utf-8") as fh:
        return [BBox3.from_dict(d) for d in json.load(fh)]
