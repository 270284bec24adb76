"""Readers and writers for point-cloud files: XYZ ASCII and PLY ASCII.

XYZ lines are "x y z [label]" with '#' comments. PLY files carry float
properties x, y, z and an optional uchar label. Both readers reject NaN/Inf.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom import PointCloud

_COORD_FMT = "%.8f"


def read_xyz(path) -> PointCloud:
    pts = []
    labels = []
    saw_label = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            has_label = len(fields) == 4
            if saw_label is None:
                saw_label = has_label
            elif saw_label != has_label:
                raise ValueError(f"{path}:{lineno}: inconsistent label column")
            pts.append([float(v) for v in fields[:3]])
            if has_label:
                labels.append(int(fields[3]))
    points = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{path}: NaN or Inf coordinates")
    return PointCloud(points, np.asarray(labels, dtype=np.int16) if saw_label else None)


def _write_rows(fh, cloud: PointCloud) -> None:
    if cloud.labels is not None:
        data = np.column_stack([cloud.points, cloud.labels.astype(np.float64)])
        np.savetxt(fh, data, fmt=f"{_COORD_FMT} {_COORD_FMT} {_COORD_FMT} %d")
    else:
        np.savetxt(fh, cloud.points, fmt=_COORD_FMT)


def write_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _write_rows(fh, cloud)


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().strip()
        if magic != "ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = fh.readline().split()
        if len(fmt) < 2 or fmt[0] != "format" or fmt[1] != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        n_vertex = None
        props: list[str] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            fields = line.split()
            if not fields or fields[0] == "comment":
                continue
            if fields[0] == "element":
                in_vertex = fields[1] == "vertex"
                if in_vertex:
                    n_vertex = int(fields[2])
            elif fields[0] == "property" and in_vertex:
                props.append(fields[2])
            elif fields[0] == "end_header":
                break
        if n_vertex is None:
            raise ValueError(f"{path}: no vertex element")
        for axis in ("x", "y", "z"):
            if axis not in props:
                raise ValueError(f"{path}: missing property {axis}")
        cols = {name: props.index(name) for name in props}
        if n_vertex == 0:
            data = np.zeros((0, len(props)))
        else:
            data = np.loadtxt(fh, dtype=np.float64, max_rows=n_vertex, ndmin=2)
    if data.shape[0] != n_vertex or data.shape[1] != len(props):
        raise ValueError(f"{path}: vertex data does not match header")
    points = data[:, [cols["x"], cols["y"], cols["z"]]]
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{path}: NaN or Inf coordinates")
    labels = None
    if "label" in cols:
        labels = data[:, cols["label"]].astype(np.int16)
    return PointCloud(points, labels)


def write_ply(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if cloud.labels is not None:
            fh.write("property uchar label\n")
        fh.write("end_header\n")
        _write_rows(fh, cloud)


def read_pose_csv(path) -> np.ndarray:
    """Scanner poses as (n, 2) world x,y from a CSV of 'x,y' rows."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            x, y = line.split(",")[:2]
            rows.append((float(x), float(y)))
    if not rows:
        raise ValueError(f"{path}: no poses")
    return np.asarray(rows, dtype=np.float64)


def write_pose_csv(path, poses: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in np.asarray(poses, dtype=np.float64).reshape(-1, 2):
            fh.write(f"{_COORD_FMT % x},{_COORD_FMT % y}\n")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
