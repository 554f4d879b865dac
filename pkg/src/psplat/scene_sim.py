"""Deterministic synthetic indoor scenes for end-to-end checks.

A rectangular room (floor + four walls, the stuff classes) holds thing objects
standing on the floor. Surfaces are sampled on jittered grids with analytic
normals. A ring of inward-looking cameras renders, by z-buffered 3x3 point
splats, a millimetre depth map, a per-pixel class-embedding feature map and a
per-pixel instance mask. Mask ids are randomly split in two per view to mimic
over-segmenting 2D masks.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, GenerationError
from .formats import (atomic_write, camera_record, depth_from_png, depth_to_png, fmap_bytes, gt_json, ply_bytes,
                      png16_bytes, queries_json, write_json)
from .geometry import CameraView, PrimitiveCloud, look_at, project_points
from .metrics import GroundTruth
from .panoptic import QueryEntry, QuerySet

log = logging.getLogger(__name__)

SHAPE_CLASSES = {"box": "cabinet", "cylinder": "bin", "plane": "board", "door": "door"}
STUFF_CLASSES = ("floor", "wall")
SPLIT_ID_OFFSET = 1000
PLACEMENT_ATTEMPTS = 1000

# rng stream tags
_PLACE, _SAMPLE, _EMBED, _NORMALS, _FEATURES, _MASKS = range(1, 7)


@dataclass
class SimConfig:
    seed: int = 0
    room_size: tuple = (4.0, 4.0, 2.5)
    room: bool = True
    object_count: int = 5
    shapes: tuple = ("box", "cylinder", "plane")
    points_per_object: int = 1500
    stuff_spacing: float = 0.05
    placement_radius: float = 1.0
    placement_margin: float = 0.25
    camera_count: int = 24
    ring_radius: float = 1.6
    camera_height: float = 1.7
    target_height: float = 0.3
    image_size: tuple = (160, 120)
    focal_scale: float = 0.6
    feature_dim: int = 16
    feature_noise: float = 0.1
    mask_corruption: float = 0.3
    normal_noise: float = 0.0
    correlated_embeddings: float = 0.0

    def __post_init__(self):
        self.room_size = tuple(float(x) for x in self.room_size)
        self.shapes = tuple(self.shapes)
        self.image_size = tuple(int(x) for x in self.image_size)
        if self.object_count < 1 or self.camera_count < 1 or self.points_per_object < 1:
            raise ConfigError("object, camera and point counts must be >= 1")
        if min(self.image_size) < 1 or self.feature_dim < 1:
            raise ConfigError("image size and feature dimension must be >= 1")
        if min(self.feature_noise, self.mask_corruption, self.normal_noise) < 0:
            raise ConfigError("noise knobs must be non-negative")
        if self.mask_corruption > 1:
            raise ConfigError("mask_corruption is a rate in [0, 1]")
        if not 0 <= self.correlated_embeddings < 1:
            raise ConfigError("correlated_embeddings must lie in [0, 1)")
        unknown = set(self.shapes) - set(SHAPE_CLASSES)
        if unknown or not self.shapes:
            raise ConfigError(f"unknown shapes {sorted(unknown)}; choose from {sorted(SHAPE_CLASSES)}")

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown simulate options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("room_size", "shapes", "image_size"):
            d[k] = list(d[k])
        return d


@dataclass
class Scene:
    config: SimConfig
    cloud: PrimitiveCloud
    gt: GroundTruth
    views: list
    feature_maps: list
    masks: list
    queries: QuerySet
    owners: list = field(repr=False, default_factory=list)
    clean_normals: Optional[np.ndarray] = field(repr=False, default=None)
    noise_epoch: int = 0


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _rect(origin, a, b, normal, spacing, rng):
    la, lb = np.linalg.norm(a), np.linalg.norm(b)
    nu, nv = max(1, int(round(la / spacing))), max(1, int(round(lb / spacing)))
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    s = (iu.ravel() + rng.random(iu.size)) / nu
    t = (iv.ravel() + rng.random(iv.size)) / nv
    pts = np.asarray(origin) + s[:, None] * np.asarray(a) + t[:, None] * np.asarray(b)
    return pts, np.tile(np.asarray(normal, dtype=np.float64), (len(pts), 1))


@dataclass
class _Object:
    shape: str
    center: np.ndarray
    size: tuple
    yaw: float
    footprint: float
    wall: int = -1

    def axes(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([c, s, 0.0]), np.array([-s, c, 0.0]), np.array([0.0, 0.0, 1.0])


def _sample_object(obj: _Object, n_points: int, rng):
    ex, ey, ez = obj.axes()
    c = obj.center
    parts = []
    if obj.shape == "box":
        w, d, h = obj.size
        area = 2 * (w + d) * h + w * d
        sp = np.sqrt(area / n_points)
        parts.append(_rect(c + ex * w / 2 - ey * d / 2, ey * d, ez * h, ex, sp, rng))
        parts.append(_rect(c - ex * w / 2 + ey * d / 2, -ey * d, ez * h, -ex, sp, rng))
        parts.append(_rect(c + ey * d / 2 + ex * w / 2, -ex * w, ez * h, ey, sp, rng))
        parts.append(_rect(c - ey * d / 2 - ex * w / 2, ex * w, ez * h, -ey, sp, rng))
        parts.append(_rect(c - ex * w / 2 - ey * d / 2 + ez * h, ex * w, ey * d, ez, sp, rng))
    elif obj.shape == "cylinder":
        r, h = obj.size
        area = 2 * np.pi * r * h + np.pi * r * r
        sp = np.sqrt(area / n_points)
        nt, nz = max(3, int(round(2 * np.pi * r / sp))), max(1, int(round(h / sp)))
        it, iz = np.meshgrid(np.arange(nt), np.arange(nz), indexing="ij")
        th = 2 * np.pi * (it.ravel() + rng.random(it.size)) / nt
        z = h * (iz.ravel() + rng.random(iz.size)) / nz
        radial = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=1)
        parts.append((c + r * radial + z[:, None] * ez, radial))
        top, _ = _rect(c - r * ex - r * ey + h * ez, 2 * r * ex, 2 * r * ey, ez, sp, rng)
        keep = np.linalg.norm((top - c)[:, :2], axis=1) <= r
        parts.append((top[keep], np.tile(ez, (int(keep.sum()), 1))))
    elif obj.shape in ("plane", "door"):
        w, h = obj.size
        sp = np.sqrt(w * h / n_points)
        # face the room centre, like the wall a door hangs on
        normal = ey if np.dot(ey, -c) >= 0 else -ey
        parts.append(_rect(c - ex * w / 2, ex * w, ez * h, normal, sp, rng))
    pts = np.concatenate([p for p, _ in parts])
    nrm = np.concatenate([n for _, n in parts])
    return pts, nrm


def _inside_footprint(obj: _Object, pts: np.ndarray, pad: float) -> np.ndarray:
    rel = pts[:, :2] - obj.center[:2]
    if obj.shape == "box":
        ex, ey, _ = obj.axes()
        u = rel @ ex[:2]
        v = rel @ ey[:2]
        return (np.abs(u) <= obj.size[0] / 2 + pad) & (np.abs(v) <= obj.size[1] / 2 + pad)
    if obj.shape == "cylinder":
        return np.linalg.norm(rel, axis=1) <= obj.size[0] + pad
    return np.zeros(len(pts), dtype=bool)


def _place_objects(cfg: SimConfig, rng) -> list[_Object]:
    objs: list[_Object] = []
    hx, hy, hz = cfg.room_size[0] / 2, cfg.room_size[1] / 2, cfg.room_size[2]
    for i in range(cfg.object_count):
        shape = cfg.shapes[i % len(cfg.shapes)]
        for _ in range(PLACEMENT_ATTEMPTS):
            yaw = float(rng.uniform(0, np.pi))
            if shape == "door":
                wall = int(rng.integers(4))
                length = 2 * (hx if wall < 2 else hy)
                w, h = 0.8, min(1.8, hz - 0.2)
                along = float(rng.uniform(-length / 2 + 0.3 + w / 2, length / 2 - 0.3 - w / 2))
                # walls: 0 -> x=-hx, 1 -> x=+hx, 2 -> y=-hy, 3 -> y=+hy; door sits 1 cm off the wall
                if wall < 2:
                    sign = -1 if wall == 0 else 1
                    center = np.array([sign * (hx - 0.01), along, 0.0])
                    yaw = np.pi / 2 if sign < 0 else -np.pi / 2
                else:
                    sign = -1 if wall == 2 else 1
                    center = np.array([along, sign * (hy - 0.01), 0.0])
                    yaw = 0.0 if sign < 0 else np.pi
                cand = _Object(shape, center, (w, h), yaw, w / 2, wall)
                clash = any(o.shape == "door" and o.wall == wall and abs(
                    np.dot(o.center - center, [0, 1, 0] if wall < 2 else [1, 0, 0])) < w + 0.2 for o in objs)
            else:
                if shape == "box":
                    size = (rng.uniform(0.4, 0.7), rng.uniform(0.4, 0.7), rng.uniform(0.4, 0.8))
                    foot = np.hypot(size[0], size[1]) / 2
                elif shape == "cylinder":
                    size = (rng.uniform(0.15, 0.3), rng.uniform(0.4, 0.8))
                    foot = size[0]
                else:
                    size = (rng.uniform(0.5, 0.8), rng.uniform(0.6, 1.0))
                    foot = size[0] / 2
                r = cfg.placement_radius * np.sqrt(rng.random())
                ang = rng.uniform(0, 2 * np.pi)
                center = np.array([r * np.cos(ang), r * np.sin(ang), 0.0])
                cand = _Object(shape, center, tuple(float(s) for s in size), yaw, float(foot))
                in_room = (abs(center[0]) + foot < hx - cfg.placement_margin
                           and abs(center[1]) + foot < hy - cfg.placement_margin)
                clash = not in_room or any(
                    o.shape != "door" and np.linalg.norm(o.center[:2] - center[:2]) < o.footprint + foot + cfg.placement_margin
                    for o in objs)
            if not clash:
                objs.append(cand)
                break
        else:
            raise GenerationError(f"could not place object {i} ({shape}) after {PLACEMENT_ATTEMPTS} attempts")
    return objs


def _room_surfaces(cfg: SimConfig, rng):
    hx, hy, hz = cfg.room_size[0] / 2, cfg.room_size[1] / 2, cfg.room_size[2]
    sp = cfg.stuff_spacing
    floor = _rect([-hx, -hy, 0.0], [2 * hx, 0, 0], [0, 2 * hy, 0], [0, 0, 1.0], sp, rng)
    walls = [
        _rect([-hx, -hy, 0.0], [0, 2 * hy, 0], [0, 0, hz], [1.0, 0, 0], sp, rng),
        _rect([hx, -hy, 0.0], [0, 2 * hy, 0], [0, 0, hz], [-1.0, 0, 0], sp, rng),
        _rect([-hx, -hy, 0.0], [2 * hx, 0, 0], [0, 0, hz], [0, 1.0, 0], sp, rng),
        _rect([-hx, hy, 0.0], [2 * hx, 0, 0], [0, 0, hz], [0, -1.0, 0], sp, rng),
    ]
    return floor, walls


def _embeddings(cfg: SimConfig, n_classes: int, rng) -> np.ndarray:
    if cfg.feature_dim < n_classes:
        raise ConfigError(f"feature_dim {cfg.feature_dim} cannot hold {n_classes} orthonormal class embeddings")
    q, _ = np.linalg.qr(rng.normal(size=(cfg.feature_dim, n_classes)))
    emb = q.T
    if cfg.correlated_embeddings > 0:
        shared = emb.mean(axis=0)
        shared /= np.linalg.norm(shared)
        emb = (1 - cfg.correlated_embeddings) * emb + cfg.correlated_embeddings * shared
        emb = _unit_rows(emb)
    return _unit_rows(_f32(emb))


def _cameras(cfg: SimConfig) -> list[CameraView]:
    w, h = cfg.image_size
    f = cfg.focal_scale * w
    views = []
    for k in range(cfg.camera_count):
        ang = 2 * np.pi * k / cfg.camera_count
        eye = [cfg.ring_radius * np.cos(ang), cfg.ring_radius * np.sin(ang), cfg.camera_height]
        pose = look_at(eye, [0.0, 0.0, cfg.target_height])
        views.append(CameraView(k, w, h, f, f, w / 2.0, h / 2.0, pose))
    return views


def render_owner(positions: np.ndarray, cam: CameraView, radius: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer of (2r+1)^2 pixel splats: ``(owner index or -1, depth in metres)`` per pixel."""
    pix, z = project_points(positions, cam)
    front = np.flatnonzero(z > 0)
    col = np.floor(pix[front, 0]).astype(np.int64)
    row = np.floor(pix[front, 1]).astype(np.int64)
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    cc = np.concatenate([col + dx for dx, _ in offs])
    rr = np.concatenate([row + dy for _, dy in offs])
    who = np.tile(front, len(offs))
    ok = (cc >= 0) & (cc < cam.width) & (rr >= 0) & (rr < cam.height)
    flat = (rr * cam.width + cc)[ok]
    who = who[ok]
    depth = z[who]
    order = np.lexsort((who, depth, flat))
    flat, who, depth = flat[order], who[order], depth[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    owner = np.full(cam.width * cam.height, -1, dtype=np.int64)
    dmap = np.zeros(cam.width * cam.height)
    owner[flat[first]] = who[first]
    dmap[flat[first]] = depth[first]
    return owner.reshape(cam.height, cam.width), dmap.reshape(cam.height, cam.width)


def _render_features(owner: np.ndarray, semantic: np.ndarray, emb: np.ndarray, sigma: float, rng) -> np.ndarray:
    h, w = owner.shape
    out = np.zeros((h, w, emb.shape[1]), dtype=np.float32)
    has = owner >= 0
    vec = emb[semantic[owner[has]]]
    if sigma > 0:
        vec = vec + sigma * rng.normal(size=vec.shape)
        vec = _unit_rows(vec)
    out[has] = vec.astype(np.float32)
    return out


def _render_mask(owner: np.ndarray, instance: np.ndarray, things: np.ndarray, rate: float, rng) -> np.ndarray:
    h, w = owner.shape
    mask = np.zeros((h, w), dtype=np.uint16)
    has = owner >= 0
    mask[has] = (instance[owner[has]] + 1).astype(np.uint16)
    if rate <= 0:
        return mask
    rows, cols = np.mgrid[0:h, 0:w]
    for iid in things:
        draw = rng.random()
        theta = rng.uniform(0, np.pi)
        sel = mask == iid + 1
        if draw >= rate or not sel.any():
            continue
        cy, cx = rows[sel].mean(), cols[sel].mean()
        side = ((cols - cx) * np.cos(theta) + (rows - cy) * np.sin(theta)) > 0
        mask[sel & side] = SPLIT_ID_OFFSET + iid + 1
    return mask


def thing_instances(gt: GroundTruth) -> np.ndarray:
    things = np.isin(gt.semantic, [i for i, k in enumerate(gt.kinds) if k == "thing"])
    return np.unique(gt.instance[things])


def _render_noise(scene: Scene, epoch: int) -> None:
    cfg = scene.config
    emb = scene.queries.embeddings
    thing_ids = thing_instances(scene.gt)
    scene.feature_maps, scene.masks = [], []
    for view, owner in zip(scene.views, scene.owners):
        frng = np.random.default_rng([cfg.seed, _FEATURES, epoch, view.view_id])
        mrng = np.random.default_rng([cfg.seed, _MASKS, epoch, view.view_id])
        scene.feature_maps.append(_render_features(owner, scene.gt.semantic, emb, cfg.feature_noise, frng))
        scene.masks.append(_render_mask(owner, scene.gt.instance, thing_ids, cfg.mask_corruption, mrng))


def _noisy_normals(clean: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma <= 0:
        return clean.copy()
    return _f32(_unit_rows(clean + sigma * rng.normal(size=clean.shape)))


def generate(cfg: Optional[SimConfig] = None) -> Scene:
    cfg = cfg or SimConfig()
    place_rng = np.random.default_rng([cfg.seed, _PLACE])
    sample_rng = np.random.default_rng([cfg.seed, _SAMPLE])
    objs = _place_objects(cfg, place_rng)

    thing_names = []
    for o in objs:
        name = SHAPE_CLASSES[o.shape]
        if name not in thing_names:
            thing_names.append(name)
    class_names = thing_names + (list(STUFF_CLASSES) if cfg.room else [])
    kinds = ["thing"] * len(thing_names) + (["stuff"] * len(STUFF_CLASSES) if cfg.room else [])

    pts, nrm, sem, inst = [], [], [], []
    for i, o in enumerate(objs):
        p, n = _sample_object(o, cfg.points_per_object, sample_rng)
        pts.append(p)
        nrm.append(n)
        sem.append(np.full(len(p), thing_names.index(SHAPE_CLASSES[o.shape])))
        inst.append(np.full(len(p), i))
    if cfg.room:
        (fp, fn), walls = _room_surfaces(cfg, sample_rng)
        pad = cfg.stuff_spacing / 2
        keep = np.ones(len(fp), dtype=bool)
        for o in objs:
            keep &= ~_inside_footprint(o, fp, pad)
        pts.append(fp[keep])
        nrm.append(fn[keep])
        sem.append(np.full(int(keep.sum()), class_names.index("floor")))
        inst.append(np.full(int(keep.sum()), len(objs)))
        for w_idx, (wp, wn) in enumerate(walls):
            keep = np.ones(len(wp), dtype=bool)
            for o in objs:
                if o.shape == "door" and o.wall == w_idx:
                    ex, _, _ = o.axes()
                    along = np.abs((wp - o.center) @ ex)
                    keep &= ~((along <= o.size[0] / 2 + pad) & (wp[:, 2] <= o.size[1] + pad))
            pts.append(wp[keep])
            nrm.append(wn[keep])
            sem.append(np.full(int(keep.sum()), class_names.index("wall")))
            inst.append(np.full(int(keep.sum()), len(objs) + 1 + w_idx))

    positions = _f32(np.concatenate(pts))
    clean = _f32(_unit_rows(np.concatenate(nrm)))
    normals = _noisy_normals(clean, cfg.normal_noise, np.random.default_rng([cfg.seed, _NORMALS, 0]))
    semantic = np.concatenate(sem).astype(np.int64)
    instance = np.concatenate(inst).astype(np.int64)

    emb = _embeddings(cfg, len(class_names), np.random.default_rng([cfg.seed, _EMBED]))
    queries = QuerySet([QueryEntry(n, emb[i], k) for i, (n, k) in enumerate(zip(class_names, kinds))])
    palette = np.round(np.random.default_rng([cfg.seed, _EMBED, 1]).uniform(0.2, 1.0, (len(class_names), 3)) * 255)
    cloud = PrimitiveCloud(positions, normals, palette[semantic] / 255.0)
    gt = GroundTruth(semantic, instance, kinds, class_names)

    views = _cameras(cfg)
    owners = []
    for view in views:
        owner, depth = render_owner(positions, view)
        view.depth_map = depth_from_png(depth_to_png(depth))
        owners.append(owner)
    scene = Scene(cfg, cloud, gt, views, [], [], queries, owners, clean, 0)
    _render_noise(scene, 0)
    log.info("simulate: %d primitives, %d objects, %d views", len(positions), len(objs), len(views))
    return scene


def perturb(scene: Scene, feature_noise: float = 0.0, mask_corruption: float = 0.0,
            normal_noise: float = 0.0) -> Scene:
    """Copy of ``scene`` with noise knobs shifted by the given deltas.

    Only noise-bearing data is regenerated, from sub-seeds derived from the
    scene seed and a fresh noise epoch. Zero deltas return an identical scene.
    """
    if feature_noise == 0 and mask_corruption == 0 and normal_noise == 0:
        return replace(scene)
    cfg = replace(scene.config, feature_noise=scene.config.feature_noise + feature_noise,
                  mask_corruption=scene.config.mask_corruption + mask_corruption,
                  normal_noise=scene.config.normal_noise + normal_noise)
    epoch = scene.noise_epoch + 1
    out = replace(scene, config=cfg, noise_epoch=epoch)
    if normal_noise:
        normals = _noisy_normals(scene.clean_normals, cfg.normal_noise,
                                 np.random.default_rng([cfg.seed, _NORMALS, epoch]))
        out.cloud = PrimitiveCloud(scene.cloud.positions, normals, scene.cloud.colors)
    if feature_noise or mask_corruption:
        _render_noise(out, epoch)
    return out


def write_scene(scene: Scene, out_dir) -> dict:
    """Write every scene file plus ``scene_manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    files = {"cloud": "cloud.ply", "cameras": "cameras.json", "queries": "queries.json",
             "ground_truth": "ground_truth.json", "depth": [], "features": [], "masks": []}
    atomic_write(out_dir / files["cloud"], ply_bytes(scene.cloud))
    records = []
    for view, fmap, mask in zip(scene.views, scene.feature_maps, scene.masks):
        tag = f"view_{view.view_id:03d}"
        dfile, ffile, mfile = f"depth/{tag}.png", f"features/{tag}.fmap", f"masks/{tag}.png"
        atomic_write(out_dir / dfile, png16_bytes(depth_to_png(view.depth_map)))
        atomic_write(out_dir / ffile, fmap_bytes(fmap))
        atomic_write(out_dir / mfile, png16_bytes(mask))
        files["depth"].append(dfile)
        files["features"].append(ffile)
        files["masks"].append(mfile)
        rec = camera_record(view)
        rec.update(depth_file=dfile, feature_file=ffile, mask_file=mfile)
        records.append(rec)
    write_json(out_dir / files["cameras"], records)
    write_json(out_dir / files["queries"], queries_json(scene.queries))
    write_json(out_dir / files["ground_truth"], gt_json(scene.gt))
    manifest = {"config": scene.config.to_dict(), "noise_epoch": scene.noise_epoch, "files": files,
                "primitives": len(scene.cloud), "views": len(scene.views)}
    write_json(out_dir / "scene_manifest.json", manifest)
    return manifest


def manifest_text(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True)
