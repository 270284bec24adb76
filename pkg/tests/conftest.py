import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("fg3d", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("fg3d")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def small_scene():
    """Six well-spaced trees on gentle ground; shared by sensor/detect tests."""
    from fg3d import synthforest

    return synthforest.generate_forest(
        6, area_radius=18.0, min_spacing=8.0, seed=11, cluster_fraction=0.0
    )


@pytest.fixture(scope="session")
def scanned_scene(small_scene):
    """Scene plus ALS/TLS scans and extracted pairs, computed once."""
    from fg3d import biometrics, detect, geom, scansim

    als = scansim.simulate_als(small_scene, scansim.AlsSensor(), seed=5)
    tls = scansim.simulate_tls(
        small_scene, [(0.0, 0.0), (12.0, 0.0), (-12.0, 0.0)], scansim.TlsSensor(), seed=6
    )
    union = geom.concat_clouds([als, tls])
    ground = biometrics.ground_model_for(union, cell=1.0)
    boxes = detect.detect_trees(union, detect.DetectConfig(), ground)
    pairs, skipped = scansim.extract_pairs(small_scene, als, tls, boxes)
    return {
        "scene": small_scene,
        "als": als,
        "tls": tls,
        "ground": ground,
        "boxes": boxes,
        "pairs": pairs,
        "skipped": skipped,
    }
