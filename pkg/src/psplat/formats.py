"""On-disk formats: PLY clouds, camera JSON, 16-bit PNG rasters and the binary stage artifacts.

All binary layouts are little-endian and open with a four-byte magic.
Readers raise :class:`MalformedFileError` with the byte offset of the first
problem; :func:`validate_file` instead collects every violation it can find.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, MalformedFileError, MissingArtifactError
from .feature_field import FeatureDecoder, PyramidTriPlane
from .fusion import FeatureMap, FusedFeatureCloud
from .geometry import CameraView, PrimitiveCloud
from .graph_clustering import InstancePartition
from .metrics import GroundTruth
from .panoptic import PanopticLabeling, QueryEntry, QuerySet
from .supersegment import SuperPrimitivePartition

FMAP_VERSION = 1
TRIP_VERSION = 1
U32_NONE = 0xFFFFFFFF
U16_NONE = 0xFFFF


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    return path.read_bytes()


def read_json(path):
    raw = read_bytes(path)
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(path, exc.pos, f"invalid JSON: {exc.msg}") from None


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFileError(self.path, self.pos,
                                     f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def magic(self, expected: bytes) -> None:
        got = self.take(4, "magic")
        if got != expected:
            raise MalformedFileError(self.path, 0, f"bad magic {got!r}, expected {expected!r}")

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count, what), dtype=dt, count=count).copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise MalformedFileError(self.path, self.pos, f"{len(self.data) - self.pos} trailing bytes")


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
              "short": "<i2", "ushort": "<u2", "char": "i1"}


def ply_bytes(cloud: PrimitiveCloud, colors_u8: Optional[np.ndarray] = None) -> bytes:
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors_u8 is None and cloud.colors is not None:
        colors_u8 = np.round(np.clip(cloud.colors, 0, 1) * 255).astype(np.uint8)
    if colors_u8 is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = cloud.positions.T
    if cloud.normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T
    if colors_u8 is not None:
        rec["red"], rec["green"], rec["blue"] = np.asarray(colors_u8, dtype=np.uint8).T
    names = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {names[t]} {name}" for name, t in fields]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def _parse_ply(data: bytes, path):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MalformedFileError(path, 0, "not a PLY file (missing 'ply' or 'end_header')")
    body = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", "replace").splitlines()
    fmt = None
    elements = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements or parts[1] == "list" or parts[1] not in _PLY_TYPES:
                raise MalformedFileError(path, 0, f"unsupported property line {line!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise MalformedFileError(path, 0, f"unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise MalformedFileError(path, 0, "first PLY element must be 'vertex'")
    _, n, props = elements[0]
    dtype = np.dtype(props)
    need = dtype.itemsize * n
    if len(data) - body < need:
        raise MalformedFileError(path, len(data), f"truncated vertex data: expected {need} bytes, "
                                                  f"found {len(data) - body}")
    rec = np.frombuffer(data, dtype=dtype, count=n, offset=body)
    return rec, body + need


def load_ply(path) -> PrimitiveCloud:
    rec, _ = _parse_ply(read_bytes(path), path)
    names = rec.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise MalformedFileError(path, 0, f"vertex element lacks property {axis}")
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    normals = None
    if all(a in names for a in ("nx", "ny", "nz")):
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    colors = None
    if all(a in names for a in ("red", "green", "blue")):
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float64) / 255.0
    try:
        return PrimitiveCloud(pos, normals, colors)
    except ConfigError as exc:
        raise MalformedFileError(path, 0, str(exc)) from None


def save_ply(path, cloud: PrimitiveCloud, colors_u8: Optional[np.ndarray] = None) -> None:
    atomic_write(path, ply_bytes(cloud, colors_u8))


# ---------------------------------------------------------------- PNG rasters

def png16_bytes(arr: np.ndarray) -> bytes:
    import io
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def load_png16(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, "raster")
    try:
        with Image.open(path) as img:
            arr = np.array(img)
    except Exception as exc:  # Pillow raises a zoo of types for corrupt images
        raise MalformedFileError(path, 0, f"unreadable PNG: {exc}") from None
    if arr.ndim != 2:
        raise MalformedFileError(path, 0, "expected a single-channel PNG")
    return arr.astype(np.uint16)


def depth_to_png(depth_m: np.ndarray) -> np.ndarray:
    return np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(np.uint16)


def depth_from_png(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 1000.0


# ---------------------------------------------------------------- cameras

def camera_record(cam: CameraView) -> dict:
    rec = {"view_id": int(cam.view_id), "width": int(cam.width), "height": int(cam.height),
           "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
           "world_to_camera": [float(x) for x in cam.world_to_camera.ravel()]}
    for key in ("depth_file", "feature_file", "mask_file"):
        if getattr(cam, key):
            rec[key] = getattr(cam, key)
    return rec


def load_cameras(path, load_depth: bool = True) -> list[CameraView]:
    path = Path(path)
    data = read_json(path)
    if not isinstance(data, list):
        raise MalformedFileError(path, 0, "cameras JSON must be an array")
    views = []
    for i, rec in enumerate(data):
        try:
            cam = CameraView(
                view_id=int(rec["view_id"]), width=int(rec["width"]), height=int(rec["height"]),
                fx=float(rec["fx"]), fy=float(rec["fy"]), cx=float(rec["cx"]), cy=float(rec["cy"]),
                world_to_camera=np.asarray(rec["world_to_camera"], dtype=np.float64).reshape(4, 4),
                depth_file=rec.get("depth_file"), feature_file=rec.get("feature_file"),
                mask_file=rec.get("mask_file"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFileError(path, 0, f"camera entry {i}: {exc}") from None
        if load_depth and cam.depth_file:
            raw = load_png16(resolve(path, cam.depth_file))
            if raw.shape != (cam.height, cam.width):
                raise ConfigError(f"view {cam.view_id}: depth raster shape {raw.shape} does not match the view")
            cam.depth_map = depth_from_png(raw)
        views.append(cam)
    return views


def resolve(anchor, rel) -> Path:
    rel = Path(rel)
    return rel if rel.is_absolute() else Path(anchor).parent / rel


# ---------------------------------------------------------------- FMAP

def fmap_bytes(data: np.ndarray) -> bytes:
    data = np.ascontiguousarray(data, dtype="<f4")
    h, w, d = data.shape
    return b"FMAP" + struct.pack("<IIII", FMAP_VERSION, h, w, d) + data.tobytes()


def load_fmap_raw(path) -> np.ndarray:
    r = _Reader(read_bytes(path), path)
    r.magic(b"FMAP")
    version = r.u32("version")
    if version != FMAP_VERSION:
        raise MalformedFileError(path, 4, f"unsupported FMAP version {version}")
    h, w, d = r.u32("H"), r.u32("W"), r.u32("D")
    arr = r.array("<f4", h * w * d, "feature data").reshape(h, w, d)
    r.done()
    return arr


def load_fmap(path) -> FeatureMap:
    return FeatureMap(load_fmap_raw(path))


# ---------------------------------------------------------------- FUSE

def fuse_bytes(fused: FusedFeatureCloud) -> bytes:
    n, d = fused.features.shape
    return (b"FUSE" + struct.pack("<II", n, d)
            + np.ascontiguousarray(fused.features, dtype="<f4").tobytes()
            + np.ascontiguousarray(fused.confidence, dtype="<f4").tobytes()
            + np.ascontiguousarray(fused.obs_count, dtype="<u4").tobytes())


def load_fuse(path) -> FusedFeatureCloud:
    r = _Reader(read_bytes(path), path)
    r.magic(b"FUSE")
    n, d = r.u32("N"), r.u32("D")
    feats = r.array("<f4", n * d, "features").reshape(n, d).astype(np.float64)
    conf = r.array("<f4", n, "confidences").astype(np.float64)
    obs = r.array("<u4", n, "observation counts").astype(np.int64)
    r.done()
    return FusedFeatureCloud(feats, conf, obs)


# ---------------------------------------------------------------- TRIP

def trip_bytes(field_: PyramidTriPlane, dec: FeatureDecoder) -> bytes:
    out = [b"TRIP", struct.pack("<III", TRIP_VERSION, field_.levels, field_.channels),
           struct.pack("<6d", *field_.aabb_min, *field_.aabb_max)]
    for planes in field_.planes:
        out.append(struct.pack("<I", planes.shape[1]))
        out.append(np.ascontiguousarray(planes, dtype="<f4").tobytes())
    dims = dec.dims
    out.append(struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims))
    for w, b in zip(dec.weights, dec.biases):
        out.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(out)


def load_trip(path) -> tuple[PyramidTriPlane, FeatureDecoder]:
    r = _Reader(read_bytes(path), path)
    r.magic(b"TRIP")
    version = r.u32("version")
    if version != TRIP_VERSION:
        raise MalformedFileError(path, 4, f"unsupported TRIP version {version}")
    levels, c = r.u32("L"), r.u32("C")
    box = np.frombuffer(r.take(48, "aabb"), dtype="<f8")
    planes = []
    for _ in range(levels):
        res = r.u32("resolution")
        planes.append(r.array("<f4", 3 * res * res * c, "plane data").reshape(3, res, res, c).astype(np.float64))
    n_dims = r.u32("layer count")
    dims = [r.u32("layer dim") for _ in range(n_dims)]
    weights, biases = [], []
    for a, b in zip(dims, dims[1:]):
        weights.append(r.array("<f4", a * b, "weights").reshape(a, b).astype(np.float64))
        biases.append(r.array("<f4", b, "biases").astype(np.float64))
    r.done()
    try:
        return PyramidTriPlane(planes, box[:3].copy(), box[3:].copy()), FeatureDecoder(weights, biases)
    except ConfigError as exc:
        raise MalformedFileError(path, 0, str(exc)) from None


# ---------------------------------------------------------------- SUPR

def supr_bytes(part: SuperPrimitivePartition) -> bytes:
    n = part.labels.shape[0]
    s, d = part.features.shape
    rec = np.zeros(s, dtype=[("count", "<u4"), ("normal", "<f4", 3), ("feature", "<f4", d)])
    rec["count"] = part.counts
    rec["normal"] = part.normals
    rec["feature"] = part.features
    return (b"SUPR" + struct.pack("<I", n) + np.ascontiguousarray(part.labels, dtype="<u4").tobytes()
            + struct.pack("<II", s, d) + rec.tobytes())


def _read_supr(path):
    r = _Reader(read_bytes(path), path)
    r.magic(b"SUPR")
    n = r.u32("N")
    labels = r.array("<u4", n, "segment ids").astype(np.int64)
    s, d = r.u32("segment count"), r.u32("feature dim")
    dt = np.dtype([("count", "<u4"), ("normal", "<f4", 3), ("feature", "<f4", d)])
    rec = np.frombuffer(r.take(dt.itemsize * s, "segment records"), dtype=dt, count=s)
    r.done()
    return labels, rec


def load_supr(path) -> SuperPrimitivePartition:
    labels, rec = _read_supr(path)
    s = rec.shape[0]
    if labels.size and labels.max() >= s:
        bad = int(np.flatnonzero(labels >= s)[0])
        raise MalformedFileError(path, 8 + 4 * bad, f"primitive {bad} references missing segment {labels[bad]}")
    return SuperPrimitivePartition(labels, rec["count"].astype(np.int64), rec["normal"].astype(np.float64),
                                   rec["feature"].astype(np.float64))


# ---------------------------------------------------------------- INST

def inst_bytes(part: InstancePartition) -> bytes:
    return b"INST" + struct.pack("<I", part.labels.shape[0]) + np.ascontiguousarray(part.labels, dtype="<u4").tobytes()


def load_inst(path) -> InstancePartition:
    r = _Reader(read_bytes(path), path)
    r.magic(b"INST")
    n = r.u32("N_super")
    labels = r.array("<u4", n, "instance ids").astype(np.int64)
    r.done()
    return InstancePartition(labels)


# ---------------------------------------------------------------- PANO

_PANO_DT = np.dtype([("instance", "<u4"), ("cls", "<u2")])


def pano_bytes(lab: PanopticLabeling) -> bytes:
    rec = np.zeros(len(lab.instance), dtype=_PANO_DT)
    rec["instance"] = np.where(lab.instance < 0, U32_NONE, lab.instance)
    rec["cls"] = np.where(lab.semantic < 0, U16_NONE, lab.semantic)
    return b"PANO" + struct.pack("<I", len(rec)) + rec.tobytes()


def load_pano(path, queries: Optional[QuerySet] = None) -> PanopticLabeling:
    r = _Reader(read_bytes(path), path)
    r.magic(b"PANO")
    n = r.u32("N")
    rec = np.frombuffer(r.take(_PANO_DT.itemsize * n, "labels"), dtype=_PANO_DT, count=n)
    r.done()
    inst = rec["instance"].astype(np.int64)
    inst[inst == U32_NONE] = -1
    cls = rec["cls"].astype(np.int64)
    cls[cls == U16_NONE] = -1
    return PanopticLabeling.from_arrays(inst, cls, queries)


# ---------------------------------------------------------------- queries / ground truth

def queries_json(queries: QuerySet) -> list:
    return [{"name": e.name, "kind": e.kind, "embedding": [float(x) for x in e.embedding]} for e in queries.entries]


def load_queries(path) -> QuerySet:
    data = read_json(path)
    try:
        return QuerySet([QueryEntry(str(e["name"]), np.asarray(e["embedding"], dtype=np.float64),
                                    str(e.get("kind", "thing"))) for e in data])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(path, 0, f"bad query entry: {exc}") from None


def gt_json(gt: GroundTruth) -> dict:
    return {"class_names": list(gt.class_names), "kinds": list(gt.kinds),
            "semantic": gt.semantic.tolist(), "instance": gt.instance.tolist()}


def load_gt(path) -> GroundTruth:
    data = read_json(path)
    try:
        return GroundTruth(np.asarray(data["semantic"]), np.asarray(data["instance"]), list(data["kinds"]),
                           list(data.get("class_names", [])))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(path, 0, f"bad ground truth: {exc}") from None


# ---------------------------------------------------------------- validation

def _expect_size(violations: list, what: str, expected: int, actual: int) -> bool:
    if expected != actual:
        violations.append(f"size: {what} expected {expected} bytes, found {actual}")
        return False
    return True


def _validate_fmap(data: bytes, v: list) -> None:
    if len(data) < 20:
        _expect_size(v, "header", 20, len(data))
        return
    version, h, w, d = struct.unpack_from("<IIII", data, 4)
    if version != FMAP_VERSION:
        v.append(f"version: expected {FMAP_VERSION}, found {version}")
    if _expect_size(v, "file", 20 + 4 * h * w * d, len(data)):
        arr = np.frombuffer(data, dtype="<f4", offset=20).reshape(h, w, d)
        norms = np.linalg.norm(arr.astype(np.float64), axis=2)
        bad = np.argwhere((norms > 0) & (np.abs(norms - 1) > 1e-4))
        if len(bad):
            v.append(f"invariant: pixel (row {bad[0][0]}, col {bad[0][1]}) feature norm {norms[tuple(bad[0])]:.6f}")


def _validate_fuse(data: bytes, v: list) -> None:
    if len(data) < 12:
        _expect_size(v, "header", 12, len(data))
        return
    n, d = struct.unpack_from("<II", data, 4)
    if not _expect_size(v, "file", 12 + 4 * n * d + 8 * n, len(data)):
        return
    feats = np.frombuffer(data, "<f4", n * d, 12).reshape(n, d).astype(np.float64)
    conf = np.frombuffer(data, "<f4", n, 12 + 4 * n * d)
    obs = np.frombuffer(data, "<u4", n, 12 + 4 * n * d + 4 * n)
    norms = np.linalg.norm(feats, axis=1)
    valid = obs > 0
    for i in np.flatnonzero(valid & (np.abs(norms - 1) > 1e-4))[:5]:
        v.append(f"invariant: primitive {i} is valid but its feature norm is {norms[i]:.6f}")
    for i in np.flatnonzero(~valid & ((norms > 0) | (conf != 0)))[:5]:
        v.append(f"invariant: primitive {i} is unobserved but has a non-zero feature or confidence")
    for i in np.flatnonzero(conf < 0)[:5]:
        v.append(f"invariant: primitive {i} has negative confidence")


def _validate_trip(data: bytes, v: list) -> None:
    pos = 4
    try:
        version, levels, c = struct.unpack_from("<III", data, pos)
        pos += 12 + 48
        if version != TRIP_VERSION:
            v.append(f"version: expected {TRIP_VERSION}, found {version}")
        prev = 0
        for lvl in range(levels):
            (res,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if res <= prev:
                v.append(f"invariant: level {lvl} resolution {res} does not increase")
            prev = res
            need = 12 * res * res * c
            if pos + need > len(data):
                v.append(f"size: plane data of level {lvl} expected {need} bytes, found {len(data) - pos}")
                return
            pos += need
        (n_dims,) = struct.unpack_from("<I", data, pos)
        dims = struct.unpack_from(f"<{n_dims}I", data, pos + 4)
        pos += 4 + 4 * n_dims
        if dims and dims[0] != 3 * c * levels:
            v.append(f"invariant: decoder input {dims[0]} != 3*C*L = {3 * c * levels}")
        need = sum(4 * (a * b + b) for a, b in zip(dims, dims[1:]))
        _expect_size(v, "file", pos + need, len(data))
    except struct.error:
        v.append(f"size: header truncated at byte {pos} of {len(data)}")


def _validate_supr(path, data: bytes, v: list) -> None:
    try:
        labels, rec = _read_supr(path)
    except MalformedFileError as exc:
        v.append(f"size: {exc.reason} (at byte {exc.offset})")
        return
    s = rec.shape[0]
    for i in np.flatnonzero(labels >= s)[:5]:
        v.append(f"invariant: primitive {i} points to segment {labels[i]} but only {s} segments exist")
    inside = labels[labels < s]
    actual = np.bincount(inside, minlength=s)
    for seg in np.flatnonzero(actual != rec["count"])[:5]:
        members = np.flatnonzero(labels == seg)
        who = f" (first primitive {members[0]})" if members.size else ""
        v.append(f"invariant: segment {seg} declares {rec['count'][seg]} members, partition has {actual[seg]}{who}")
    if int(rec["count"].sum()) != labels.size:
        v.append(f"invariant: member counts sum to {int(rec['count'].sum())}, expected {labels.size}")
    for name in ("normal", "feature"):
        norms = np.linalg.norm(rec[name].astype(np.float64), axis=1)
        for seg in np.flatnonzero(np.abs(norms - 1) > 1e-4)[:5]:
            v.append(f"invariant: segment {seg} {name} norm {norms[seg]:.6f}")


def _validate_inst(data: bytes, v: list) -> None:
    if len(data) < 8:
        _expect_size(v, "header", 8, len(data))
        return
    (n,) = struct.unpack_from("<I", data, 4)
    if _expect_size(v, "file", 8 + 4 * n, len(data)) and n:
        ids = np.frombuffer(data, "<u4", n, 8)
        present = np.unique(ids)
        if not np.array_equal(present, np.arange(present.size)):
            v.append("invariant: instance ids are not consecutive from 0")


def _validate_pano(data: bytes, v: list) -> None:
    if len(data) < 8:
        _expect_size(v, "header", 8, len(data))
        return
    (n,) = struct.unpack_from("<I", data, 4)
    if not _expect_size(v, "file", 8 + _PANO_DT.itemsize * n, len(data)):
        return
    rec = np.frombuffer(data, _PANO_DT, n, 8)
    seen: dict = {}
    for i, (iid, c) in enumerate(zip(rec["instance"].tolist(), rec["cls"].tolist())):
        if iid == U32_NONE:
            continue
        if seen.setdefault(iid, c) != c:
            v.append(f"invariant: primitive {i} in instance {iid} has class {c}, instance class is {seen[iid]}")
            return


def _validate_ply(path, data: bytes, v: list) -> None:
    try:
        rec, end = _parse_ply(data, path)
    except MalformedFileError as exc:
        v.append(f"format: {exc.reason}")
        return
    if end != len(data):
        v.append(f"size: {len(data) - end} trailing bytes after vertex data")
    names = rec.dtype.names
    pos = np.stack([rec[a] for a in "xyz" if a in names], axis=1) if all(a in names for a in "xyz") else None
    if pos is None:
        v.append("format: vertex element lacks x/y/z")
    elif not np.all(np.isfinite(pos)):
        v.append(f"invariant: primitive {int(np.flatnonzero(~np.isfinite(pos).all(axis=1))[0])} has a non-finite position")
    if all(a in names for a in ("nx", "ny", "nz")):
        nrm = np.linalg.norm(np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64), axis=1)
        for i in np.flatnonzero(np.abs(nrm - 1) > 1e-4)[:5]:
            v.append(f"invariant: primitive {i} normal norm {nrm[i]:.6f}")


def _validate_json(path, data: bytes, v: list) -> str:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        v.append(f"format: invalid JSON at byte {exc.pos}: {exc.msg}")
        return "json"
    if isinstance(doc, list) and doc and isinstance(doc[0], dict) and "world_to_camera" in doc[0]:
        for i, rec in enumerate(doc):
            try:
                CameraView(int(rec["view_id"]), int(rec["width"]), int(rec["height"]), float(rec["fx"]),
                           float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                           np.asarray(rec["world_to_camera"], dtype=np.float64).reshape(4, 4))
            except (ConfigError, KeyError, TypeError, ValueError) as exc:
                v.append(f"invariant: camera entry {i}: {exc}")
        return "cameras"
    if isinstance(doc, list) and doc and isinstance(doc[0], dict) and "embedding" in doc[0]:
        names = [e.get("name") for e in doc]
        if len(set(names)) != len(names):
            v.append("invariant: query names are not unique")
        for e in doc:
            n = float(np.linalg.norm(np.asarray(e["embedding"], dtype=np.float64)))
            if abs(n - 1) > 1e-4:
                v.append(f"invariant: query {e.get('name')!r} embedding norm {n:.6f}")
            if e.get("kind", "thing") not in ("thing", "stuff"):
                v.append(f"invariant: query {e.get('name')!r} kind {e.get('kind')!r}")
        return "queries"
    if isinstance(doc, dict) and "semantic" in doc and "instance" in doc:
        if len(doc["semantic"]) != len(doc["instance"]):
            v.append("invariant: semantic and instance arrays differ in length")
        return "ground_truth"
    return "json"


def validate_file(path) -> dict:
    """Check magic, version, sizes and invariants; returns ``{path, format, violations}``."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path, "file")
    data = path.read_bytes()
    v: list = []
    magic = data[:4]
    kind = {b"FMAP": "FMAP", b"FUSE": "FUSE", b"TRIP": "TRIP", b"SUPR": "SUPR", b"INST": "INST",
            b"PANO": "PANO"}.get(magic)
    if kind == "FMAP":
        _validate_fmap(data, v)
    elif kind == "FUSE":
        _validate_fuse(data, v)
    elif kind == "TRIP":
        _validate_trip(data, v)
    elif kind == "SUPR":
        _validate_supr(path, data, v)
    elif kind == "INST":
        _validate_inst(data, v)
    elif kind == "PANO":
        _validate_pano(data, v)
    elif data.startswith(b"ply\n"):
        kind = "PLY"
        _validate_ply(path, data, v)
    elif data.startswith(b"\x89PNG"):
        kind = "PNG"
        try:
            load_png16(path)
        except MalformedFileError as exc:
            v.append(f"format: {exc.reason}")
    elif data.lstrip()[:1] in (b"[", b"{"):
        kind = _validate_json(path, data, v)
    else:
        kind = "unknown"
        v.append(f"format: unrecognised magic {magic!r}")
    return {"path": str(path), "format": kind, "violations": v}
