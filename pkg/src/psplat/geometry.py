"""Camera model, projection, visibility, normals and kNN adjacency.

Pixel convention: pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)``
in continuous image coordinates, so its center sits at ``(col+0.5, row+0.5)``.
Camera frame is x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError

DEFAULT_K = 16
DEFAULT_DEPTH_TOL = 0.05


@dataclass
class PrimitiveCloud:
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape[0] < 1:
            raise ConfigError("primitive cloud must hold at least one primitive")
        if not np.all(np.isfinite(self.positions)):
            raise ConfigError("primitive positions must be finite")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.positions.shape:
                raise ConfigError("normals must match positions in shape")
            norms = np.linalg.norm(self.normals, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-4)
            if bad.size:
                raise ConfigError(f"normal of primitive {int(bad[0])} is not unit length")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if self.colors.shape != self.positions.shape:
                raise ConfigError("colors must match positions in shape")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


@dataclass
class CameraView:
    view_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    depth_map: Optional[np.ndarray] = None
    depth_file: Optional[str] = None
    feature_file: Optional[str] = None
    mask_file: Optional[str] = None

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"view {self.view_id}: focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"view {self.view_id}: image size must be at least 1x1")
        rot = self.rotation
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ConfigError(f"view {self.view_id}: rotation block is not a proper rotation")
        if not np.allclose(self.world_to_camera[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ConfigError(f"view {self.view_id}: last row of world_to_camera must be 0 0 0 1")
        if self.depth_map is not None:
            self.depth_map = np.asarray(self.depth_map, dtype=np.float64)
            if self.depth_map.shape != (self.height, self.width):
                raise ConfigError(f"view {self.view_id}: depth map shape does not match resolution")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """world_to_camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    mat = np.eye(4)
    mat[:3, :3] = rot
    mat[:3, 3] = -rot @ eye
    return mat


def to_camera(points: np.ndarray, cam: CameraView) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points @ cam.rotation.T + cam.translation


def project_points(points: np.ndarray, cam: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised pinhole projection.

    Returns ``(pixels, depth)``; rows with ``depth <= 0`` are behind the camera
    and their pixel coordinates are NaN.
    """
    pc = to_camera(points, cam)
    z = pc[:, 2]
    front = z > 0
    pix = np.full((pc.shape[0], 2), np.nan)
    zf = z[front]
    pix[front, 0] = cam.fx * pc[front, 0] / zf + cam.cx
    pix[front, 1] = cam.fy * pc[front, 1] / zf + cam.cy
    return pix, z


def project(point, cam: CameraView):
    """Project one world point. Returns ``(pixel, depth)`` or ``None`` if behind the camera."""
    pix, z = project_points(np.asarray(point, dtype=np.float64)[None], cam)
    if z[0] <= 0:
        return None
    return pix[0], float(z[0])


def pixel_index(pixels: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-pixel (col, row) for continuous coordinates plus an in-frame mask."""
    with np.errstate(invalid="ignore"):
        inside = (
            np.isfinite(pixels[:, 0])
            & (pixels[:, 0] >= 0)
            & (pixels[:, 0] < width)
            & (pixels[:, 1] >= 0)
            & (pixels[:, 1] < height)
        )
    col = np.zeros(pixels.shape[0], dtype=np.int64)
    row = np.zeros(pixels.shape[0], dtype=np.int64)
    col[inside] = np.minimum(np.floor(pixels[inside, 0]).astype(np.int64), width - 1)
    row[inside] = np.minimum(np.floor(pixels[inside, 1]).astype(np.int64), height - 1)
    return col, row, inside


@dataclass
class Observation:
    """Per-primitive projection of a cloud into one view."""

    pixels: np.ndarray
    depth: np.ndarray
    col: np.ndarray
    row: np.ndarray
    visible: np.ndarray


def observe(positions: np.ndarray, cam: CameraView, depth_tol: float = DEFAULT_DEPTH_TOL,
            use_depth: bool = True) -> Observation:
    if depth_tol <= 0:
        raise ConfigError("depth_tol must be positive")
    pix, z = project_points(positions, cam)
    col, row, inside = pixel_index(pix, cam.width, cam.height)
    visible = inside & (z > 0)
    if use_depth and cam.depth_map is not None:
        ref = cam.depth_map[row[visible], col[visible]]
        ok = np.abs(z[visible] - ref) <= depth_tol
        idx = np.flatnonzero(visible)
        visible[idx[~ok]] = False
    return Observation(pix, z, col, row, visible)


def visibility(cloud: PrimitiveCloud, cam: CameraView, depth_tol: float = DEFAULT_DEPTH_TOL) -> np.ndarray:
    return observe(cloud.positions, cam, depth_tol).visible


def _knn_sorted(positions: np.ndarray, k: int, include_self: bool) -> np.ndarray:
    """k nearest neighbours per point, ordered by (distance, index).

    Candidates come from a kd-tree ball query at the k-th distance so that ties
    at the boundary are always resolved by the lower index.
    """
    n = positions.shape[0]
    tree = cKDTree(positions)
    want = k if include_self else k + 1
    dist, _ = tree.query(positions, k=want)
    dist = dist.reshape(n, -1)
    radius = dist[:, -1] * (1.0 + 1e-9) + 1e-12
    out = np.empty((n, k), dtype=np.int64)
    balls = tree.query_ball_point(positions, radius)
    for i in range(n):
        cand = np.asarray(balls[i], dtype=np.int64)
        if not include_self:
            cand = cand[cand != i]
        d2 = np.sum((positions[cand] - positions[i]) ** 2, axis=1)
        order = np.lexsort((cand, d2))
        out[i] = cand[order[:k]]
    return out


def estimate_normals(cloud: PrimitiveCloud, k: int = DEFAULT_K,
                     camera_centers: Optional[Sequence] = None) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals from k-neighbourhoods.

    Returns ``(normals, degenerate)``. The sign makes each normal face the
    centroid of ``camera_centers`` when given, otherwise it points to +z.
    Degenerate (zero-covariance) neighbourhoods get ``(0, 0, 1)``.
    """
    n = len(cloud)
    if k < 3 or n <= k:
        raise ConfigError(f"estimate_normals needs k >= 3 and N > k (k={k}, N={n})")
    pos = cloud.positions
    nbrs = _knn_sorted(pos, k + 1, include_self=True)
    pts = pos[nbrs]
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    degenerate = evals[:, -1] <= 1e-18
    if camera_centers is not None and len(camera_centers):
        target = np.mean(np.asarray(camera_centers, dtype=np.float64).reshape(-1, 3), axis=0)
        flip = np.einsum("ni,ni->n", normals, target - pos) < 0
    else:
        flip = normals[:, 2] < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals, degenerate


@dataclass
class AdjacencyGraph:
    """Symmetric neighbour structure in CSR form; ``edges`` holds each pair once with i < j."""

    n: int
    edges: np.ndarray
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    @classmethod
    def from_edges(cls, n: int, edges) -> "AdjacencyGraph":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        edges = np.sort(edges, axis=1)
        edges = edges[edges[:, 0] != edges[:, 1]]
        if edges.size:
            edges = np.unique(edges, axis=0)
        both = np.concatenate([edges, edges[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=n)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return cls(n, edges, indptr, both[:, 1].copy())

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]


def knn_graph(cloud: PrimitiveCloud, k: int = DEFAULT_K) -> AdjacencyGraph:
    n = len(cloud)
    if k < 1 or n <= k:
        raise ConfigError(f"knn_graph needs k >= 1 and N > k (k={k}, N={n})")
    nbrs = _knn_sorted(cloud.positions, k, include_self=False)
    src = np.repeat(np.arange(n), k)
    return AdjacencyGraph.from_edges(n, np.stack([src, nbrs.ravel()], axis=1))
