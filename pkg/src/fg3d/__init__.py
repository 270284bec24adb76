"""Desk-scale ALS-conditioned 3D forest structure generation and evaluation."""

__version__ = "0.1.0"

from .geom import (  # noqa: F401
    ConvexHull3,
    GroundModel,
    PointCloud,
    SemanticLabel,
    SpatialIndex,
    UnitCubeTransform,
    build_convex_hull,
    contains,
    distance_to_hull_surface,
    normalize_unit_cube,
    subsample_fixed,
    voxel_downsample,
)
from .scansim import AlsSensor, TlsSensor, TreePair  # noqa: F401
from .synthforest import LabeledScene, TreeParams  # noqa: F401
