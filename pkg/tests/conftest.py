import numpy as np
import pytest

from psplat.geometry import CameraView, PrimitiveCloud, look_at

ACCEPTANCE_LINES = []


def record_acceptance(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_camera(eye, target, width=64, height=48, f=50.0, view_id=0, depth=None):
    return CameraView(view_id, width, height, f, f, width / 2.0, height / 2.0, look_at(eye, target),
                      depth_map=depth)


def plane_grid(n=20, spacing=0.05, z=0.0):
    g = (np.arange(n) + 0.5) * spacing
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
    return PrimitiveCloud(pts, np.tile([0.0, 0.0, 1.0], (len(pts), 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dihedral_scene(n=20, spacing=0.05):
    """Floor z=0 (normal +z) meeting wall x=0 (normal +x) along the y axis."""
    g = (np.arange(n) + 0.5) * spacing
    a, b = np.meshgrid(g, g, indexing="ij")
    floor = np.stack([a.ravel(), b.ravel(), np.zeros(a.size)], axis=1)
    wall = np.stack([np.zeros(a.size), b.ravel(), a.ravel()], axis=1)
    pos = np.vstack([floor, wall])
    normals = np.vstack([np.tile([0.0, 0, 1], (a.size, 1)), np.tile([1.0, 0, 0], (a.size, 1))])
    side = np.repeat([0, 1], a.size)
    return PrimitiveCloud(pos, normals), side


def two_label_plane(n=30, spacing=0.05, dim=4):
    """Flat grid whose left half carries e_0 and right half e_1."""
    cloud = plane_grid(n, spacing)
    label = (cloud.positions[:, 0] > n * spacing / 2).astype(int)
    feats = np.eye(dim)[label]
    return cloud, feats, label


TINY_SIM = {"object_count": 2, "camera_count": 8, "points_per_object": 500, "image_size": [80, 60],
            "stuff_spacing": 0.1}


def tiny_config(tmp_dir, **extra):
    """Write a fast pipeline config into ``tmp_dir`` and return its path."""
    import json
    cfg = {"simulate": dict(TINY_SIM), "field": {"resolutions": [16, 32, 64], "hidden": 32},
           "distill": {"iterations": 60, "batch_size": 512}, "supersegment": {"min_size": 5}}
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **val}
        else:
            cfg[key] = val
    path = tmp_dir / "config.json"
    path.write_text(json.dumps(cfg))
    return path
