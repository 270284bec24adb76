"""Procedural conifer-like trees and multi-tree scenes with full ground truth.

Trees are a tapered stem, whorled branches, and a conical foliage crown;
scenes add undulating ground and optional shrub understory. Every point
carries a semantic label and an owning-tree id (-1 for ground/understory),
and generation is bitwise deterministic given (params, seed).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import io
from .geom import GroundModel, PointCloud, SemanticLabel, concat_clouds
from ._util import derive_seed

POINT_NOISE_SIGMA = 0.02  # meters, isotropic, applied to every surface sample


class PackingFailure(RuntimeError):
    """Rejection sampling could not place all tree bases at the given spacing."""


@dataclass(frozen=True)
class TreeParams:
    height: float
    dbh: float
    crown_base_frac: float
    crown_radius: float
    whorl_count: int
    foliage_density: float  # points per cubic meter of crown volume
    taper_exponent: float

    def __post_init__(self):
        if not self.height > 0:
            raise ValueError("height must be positive")
        if not 0 < self.dbh < self.height:
            raise ValueError("dbh must be in (0, height)")
        if not 0 < self.crown_base_frac < 1:
            raise ValueError("crown_base_frac must be in (0, 1)")
        if not self.crown_radius > 0:
            raise ValueError("crown_radius must be positive")

    def stem_radius(self, z) -> np.ndarray:
        """Stem surface radius at height z: (dbh/2) * (1 - z/height)^taper."""
        frac = np.clip(1.0 - np.asarray(z, dtype=np.float64) / self.height, 0.0, 1.0)
        return (self.dbh / 2.0) * frac**self.taper_exponent

    def crown_base(self) -> float:
        return self.crown_base_frac * self.height

    def crown_envelope_radius(self, z) -> np.ndarray:
        """Conical crown envelope, widest at the crown base, zero at the tip."""
        base = self.crown_base()
        frac = np.clip((self.height - np.asarray(z, dtype=np.float64)) / (self.height - base), 0.0, 1.0)
        return self.crown_radius * frac


DEFAULT_PARAM_RANGES: dict[str, tuple[float, float]] = {
    "height": (8.0, 18.0),
    "dbh": (0.18, 0.45),
    "crown_base_frac": (0.25, 0.45),
    "crown_radius": (1.2, 2.8),
    "whorl_count": (4, 9),
    "foliage_density": (14.0, 30.0),
    "taper_exponent": (0.6, 1.0),
}


def _sample_params(rng: np.random.Generator, ranges: dict) -> TreeParams:
    merged = dict(DEFAULT_PARAM_RANGES)
    merged.update(ranges or {})
    values = {}
    for key, (lo, hi) in merged.items():
        if key == "whorl_count":
            values[key] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            values[key] = float(rng.uniform(lo, hi))
    # dbh must stay below height even for adversarial ranges
    values["dbh"] = min(values["dbh"], 0.9 * values["height"])
    return TreeParams(**values)


def _inverse_cdf_sample(rng, n, z_grid, density):
    """Draw n samples of z with pdf proportional to density(z_grid)."""
    cdf = np.cumsum(density)
    if cdf[-1] <= 0:
        return rng.uniform(z_grid[0], z_grid[-1], size=n)
    cdf = cdf / cdf[-1]
    return np.interp(rng.random(n), cdf, z_grid)


def generate_tree(
    params: TreeParams,
    seed: int,
    *,
    noise_sigma: float = POINT_NOISE_SIGMA,
    stem_density: float = 350.0,  # points per m^2 of stem surface
    branch_point_spacing: float = 0.08,
    ground_disk: bool = True,
    ground_density: float = 50.0,  # points per m^2; ground must dominate the low tail
) -> PointCloud:
    """One labeled tree standing at the origin with its base at z = 0."""
    rng = np.random.default_rng(seed)
    h = params.height
    sections: list[tuple[np.ndarray, int]] = []

    # Stem: surface samples of the tapered cylinder, density-weighted in z.
    z_grid = np.linspace(0.0, h, 512)
    radii = params.stem_radius(z_grid)
    area = float(np.trapezoid(2.0 * np.pi * radii, z_grid))
    n_stem = max(60, int(stem_density * area))
    z = _inverse_cdf_sample(rng, n_stem, z_grid, radii)
    theta = rng.uniform(0.0, 2.0 * np.pi, n_stem)
    r = params.stem_radius(z)
    stem = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    stem = np.vstack([stem, [0.0, 0.0, h]])  # explicit apex point
    sections.append((stem, SemanticLabel.STEM))

    # Branch whorls: straight drooping shoots radiating from the stem.
    crown_base = params.crown_base()
    if params.whorl_count > 0:
        whorl_z = np.linspace(crown_base, 0.96 * h, params.whorl_count)
        branch_pts = []
        for wz in whorl_z:
            length = float(params.crown_envelope_radius(wz))
            if length < 0.1:
                continue
            n_branches = int(rng.integers(4, 7))
            azimuths = rng.uniform(0.0, 2.0 * np.pi, n_branches)
            droop = rng.uniform(0.1, 0.35, n_branches)
            for az, dr in zip(azimuths, droop):
                steps = max(2, int(length / branch_point_spacing))
                t = np.linspace(0.0, 1.0, steps)
                bx = t * length * np.cos(az)
                by = t * length * np.sin(az)
                bz = wz - t * length * dr
                branch_pts.append(np.column_stack([bx, by, bz]))
        if branch_pts:
            sections.append((np.vstack(branch_pts), SemanticLabel.BRANCH))

    # Foliage: volume samples of the crown cone, pdf in z proportional to area.
    crown_height = h - crown_base
    crown_volume = np.pi * params.crown_radius**2 * crown_height / 3.0
    n_fol = max(80, int(params.foliage_density * crown_volume))
    zf_grid = np.linspace(crown_base, h, 256)
    zf = _inverse_cdf_sample(rng, n_fol, zf_grid, params.crown_envelope_radius(zf_grid) ** 2)
    rf = params.crown_envelope_radius(zf) * np.sqrt(rng.random(n_fol))
    tf = rng.uniform(0.0, 2.0 * np.pi, n_fol)
    foliage = np.column_stack([rf * np.cos(tf), rf * np.sin(tf), zf])
    sections.append((foliage, SemanticLabel.FOLIAGE))

    if ground_disk:
        g_r = max(1.5 * params.crown_radius, 2.0)
        n_g = max(40, int(ground_density * np.pi * g_r**2))
        rho = g_r * np.sqrt(rng.random(n_g))
        ang = rng.uniform(0.0, 2.0 * np.pi, n_g)
        ground = np.column_stack([rho * np.cos(ang), rho * np.sin(ang), np.zeros(n_g)])
        sections.append((ground, SemanticLabel.GROUND))

    points = np.vstack([pts for pts, _ in sections])
    labels = np.concatenate(
        [np.full(len(pts), lab, dtype=np.int16) for pts, lab in sections]
    )
    points = points + rng.normal(0.0, noise_sigma, points.shape)
    return PointCloud(points, labels)


@dataclass(frozen=True)
class LabeledScene:
    """Multi-tree scene: params + base positions, ground model, labeled cloud."""

    trees: tuple  # of (TreeParams, (x, y))
    ground: GroundModel
    cloud: PointCloud  # labels and owner ids set for every point

    def tree_bases(self) -> np.ndarray:
        return np.asarray([[x, y] for _, (x, y) in self.trees], dtype=np.float64)


def _make_ground(rng, radius: float, amplitude: float, wavelength: float, cell: float = 1.0):
    half = radius + 6.0
    xs = np.arange(-half, half + cell, cell)
    ys = np.arange(-half, half + cell, cell)
    phases = rng.uniform(0.0, 2.0 * np.pi, 3)
    gx, gy = np.meshgrid(xs, ys)
    values = amplitude * np.sin(2 * np.pi * gx / wavelength + phases[0]) * np.cos(
        2 * np.pi * gy / wavelength + phases[1]
    ) + 0.4 * amplitude * np.sin(2 * np.pi * (gx + gy) / (1.7 * wavelength) + phases[2])
    return GroundModel(np.array([xs[0], ys[0]]), cell, values)


def _place_bases(
    rng, n_trees: int, area_radius: float, min_spacing: float, cluster_fraction: float
) -> np.ndarray:
    n_cluster = int(round(cluster_fraction * n_trees))
    n_main = n_trees - n_cluster
    if n_main * np.pi * min_spacing**2 / 4.0 >= np.pi * area_radius**2:
        raise PackingFailure("infeasible packing density")
    bases: list[np.ndarray] = []
    attempts = 0
    max_attempts = 400 * max(n_main, 1)
    while len(bases) < n_main:
        attempts += 1
        if attempts > max_attempts:
            raise PackingFailure(
                f"placed {len(bases)}/{n_main} bases in {max_attempts} attempts"
            )
        rho = area_radius * np.sqrt(rng.random())
        ang = rng.uniform(0.0, 2.0 * np.pi)
        cand = np.array([rho * np.cos(ang), rho * np.sin(ang)])
        if all(np.linalg.norm(cand - b) >= min_spacing for b in bases):
            bases.append(cand)
    for _ in range(n_cluster):
        host = bases[int(rng.integers(0, len(bases)))]
        dist = rng.uniform(max(1.2, 0.15 * min_spacing), 0.6 * min_spacing)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        bases.append(host + dist * np.array([np.cos(ang), np.sin(ang)]))
    return np.asarray(bases)


def generate_forest(
    n_trees: int,
    area_radius: float,
    param_ranges: dict | None = None,
    min_spacing: float = 8.0,
    seed: int = 0,
    *,
    cluster_fraction: float = 0.0,
    understory: bool = True,
    shrub_density: float = 0.004,  # shrubs per m^2
    ground_density: float = 20.0,  # ground must dominate the low tail under crowns
    ground_amplitude: float = 0.3,
    ground_wavelength: float = 40.0,
    noise_sigma: float = POINT_NOISE_SIGMA,
) -> LabeledScene:
    """Scene of n_trees conifers on undulating ground inside a disk."""
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    rng = np.random.default_rng(derive_seed(seed, "scene"))
    ground = _make_ground(rng, area_radius, ground_amplitude, ground_wavelength)
    bases = _place_bases(rng, n_trees, area_radius, min_spacing, cluster_fraction)

    trees = []
    parts: list[PointCloud] = []
    for i, (bx, by) in enumerate(bases):
        params = _sample_params(rng, param_ranges or {})
        tree = generate_tree(
            params, derive_seed(seed, "tree", i), noise_sigma=noise_sigma, ground_disk=False
        )
        gz = float(ground.elevation(bx, by))
        shifted = tree.points + np.array([bx, by, gz])
        parts.append(
            PointCloud(shifted, tree.labels, np.full(len(tree), i, dtype=np.int32))
        )
        trees.append((params, (float(bx), float(by))))

    # Area-wide ground sheet at the scene density.
    area = np.pi * (area_radius + 3.0) ** 2
    n_g = max(200, int(ground_density * area))
    rho = (area_radius + 3.0) * np.sqrt(rng.random(n_g))
    ang = rng.uniform(0.0, 2.0 * np.pi, n_g)
    gx = rho * np.cos(ang)
    gy = rho * np.sin(ang)
    gz = ground.elevation(gx, gy) + rng.normal(0.0, noise_sigma, n_g)
    parts.append(
        PointCloud(
            np.column_stack([gx, gy, gz]),
            np.full(n_g, SemanticLabel.GROUND, dtype=np.int16),
            np.full(n_g, -1, dtype=np.int32),
        )
    )

    if understory and shrub_density > 0:
        n_shrubs = max(0, int(shrub_density * np.pi * area_radius**2))
        shrub_parts = []
        for _ in range(n_shrubs):
            rho = area_radius * np.sqrt(rng.random())
            ang = rng.uniform(0.0, 2.0 * np.pi)
            cx, cy = rho * np.cos(ang), rho * np.sin(ang)
            radius = rng.uniform(0.3, 1.0)
            height = rng.uniform(0.2, 0.8)
            n_pts = int(rng.integers(30, 90))
            local = rng.normal(0.0, 1.0, (n_pts, 3)) * np.array([radius, radius, height / 2])
            local[:, 2] = np.abs(local[:, 2])
            base_z = float(ground.elevation(cx, cy))
            shrub_parts.append(local + np.array([cx, cy, base_z]))
        if shrub_parts:
            shrub_pts = np.vstack(shrub_parts)
            parts.append(
                PointCloud(
                    shrub_pts,
                    np.full(len(shrub_pts), SemanticLabel.LOW_VEG, dtype=np.int16),
                    np.full(len(shrub_pts), -1, dtype=np.int32),
                )
            )

    return LabeledScene(tuple(trees), ground, concat_clouds(parts))


# ---------------------------------------------------------------------------
# Scene serialization: master cloud (PLY) + per-tree params (JSON) + ground (CSV)
# ---------------------------------------------------------------------------


def save_scene(scene: LabeledScene, out_dir) -> Path:
    out = io.ensure_dir(out_dir)
    io.write_ply(out / "master.ply", scene.cloud)
    np.savetxt(out / "owners.csv", scene.cloud.owners, fmt="%d")
    trees = [
        {"params": asdict(params), "base": [x, y]} for params, (x, y) in scene.trees
    ]
    (out / "params.json").write_text(json.dumps(trees, indent=2, sort_keys=True))
    g = scene.ground
    with open(out / "ground.csv", "w", encoding="utf-8") as fh:
        fh.write("# origin_x,origin_y,cell,ny,nx\n")
        fh.write(
            f"{float(g.origin[0])!r},{float(g.origin[1])!r},{float(g.cell)!r},"
            f"{g.values.shape[0]},{g.values.shape[1]}\n"
        )
        np.savetxt(fh, g.values, fmt="%.8f", delimiter=",")
    return out


def load_scene(scene_dir) -> LabeledScene:
    src = Path(scene_dir)
    cloud = io.read_ply(src / "master.ply")
    owners = np.loadtxt(src / "owners.csv", dtype=np.int32, ndmin=1)
    cloud = PointCloud(cloud.points, cloud.labels, owners)
    trees = tuple(
        (TreeParams(**entry["params"]), (float(entry["base"][0]), float(entry["base"][1])))
        for entry in json.loads((src / "params.json").read_text())
    )
    with open(src / "ground.csv", "r", encoding="utf-8") as fh:
        fh.readline()  # comment header
        ox, oy, cell, ny, nx = fh.readline().split(",")
        values = np.loadtxt(fh, delimiter=",", ndmin=2)
    ground = GroundModel(np.array([float(ox), float(oy)]), float(cell), values)
    if values.shape != (int(ny), int(nx)):
        raise ValueError(f"{scene_dir}: ground grid shape mismatch")
    return LabeledScene(trees, ground, cloud)
