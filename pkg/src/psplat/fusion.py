"""Back-projection of multi-view feature maps onto primitives.

Each primitive collects one bilinear sample per view in which it passes the
depth test. Samples are pooled by their renormalised mean; the spread of the
samples and the fraction of views observing the primitive give its confidence.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, PipelineError
from .geometry import DEFAULT_DEPTH_TOL, CameraView, PrimitiveCloud, observe

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
DEFAULT_GAMMA_MAX = 1e4


@dataclass
class FeatureMap:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ConfigError("feature map must be H x W x D")
        norms = np.linalg.norm(data, axis=2, keepdims=True)
        valid = norms > 0
        self.data = np.where(valid, data / np.where(valid, norms, 1.0), 0.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class FusedFeatureCloud:
    features: np.ndarray
    confidence: np.ndarray
    obs_count: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.obs_count >= 1

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def bilinear_sample(data: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Sample an H x W x D raster at continuous pixel coordinates (border-clamped)."""
    h, w = data.shape[:2]
    x = np.clip(pixels[:, 0] - 0.5, 0.0, w - 1)
    y = np.clip(pixels[:, 1] - 0.5, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (x - x0)[:, None]
    ty = (y - y0)[:, None]
    top = data[y0, x0] * (1 - tx) + data[y0, x1] * tx
    bottom = data[y1, x0] * (1 - tx) + data[y1, x1] * tx
    return top * (1 - ty) + bottom * ty


def gather_observations(cloud: PrimitiveCloud, view: CameraView, fmap: FeatureMap,
                        depth_tol: float = DEFAULT_DEPTH_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Per-primitive feature samples from one view.

    Returns ``(samples, present)``: ``samples`` is N x D with unit rows where
    ``present`` is true and zeros elsewhere.
    """
    if (fmap.height, fmap.width) != (view.height, view.width):
        raise ConfigError(
            f"view {view.view_id}: feature map is {fmap.width}x{fmap.height}, "
            f"view is {view.width}x{view.height}"
        )
    obs = observe(cloud.positions, view, depth_tol)
    idx = np.flatnonzero(obs.visible)
    samples = np.zeros((len(cloud), fmap.dim))
    present = np.zeros(len(cloud), dtype=bool)
    if idx.size == 0:
        return samples, present
    vals = bilinear_sample(fmap.data, obs.pixels[idx])
    norms = np.linalg.norm(vals, axis=1)
    ok = norms > 1e-12
    samples[idx[ok]] = vals[ok] / norms[ok, None]
    present[idx[ok]] = True
    return samples, present


def pool(samples: Sequence[np.ndarray]) -> tuple[Optional[np.ndarray], bool]:
    """Renormalised mean of unit samples.

    Returns ``(feature, degenerate)``. An empty list yields ``(None, False)``;
    a zero mean falls back to the first sample with ``degenerate=True``.
    """
    if len(samples) == 0:
        return None, False
    arr = np.asarray(samples, dtype=np.float64)
    mean = arr.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        return arr[0].copy(), True
    return mean / norm, False


def confidence(obs_count, m: int, per_dim_variance, eps: float = DEFAULT_EPS,
               gamma_max: float = DEFAULT_GAMMA_MAX):
    """Observation fraction over summed feature variance, clamped to ``gamma_max``.

    Accepts scalars or arrays (``per_dim_variance`` then has a trailing D axis).
    """
    obs = np.asarray(obs_count, dtype=np.float64)
    var_sum = np.sum(np.asarray(per_dim_variance, dtype=np.float64), axis=-1)
    gamma = (obs / m) / (var_sum + eps)
    gamma = np.where(obs > 0, np.minimum(gamma, gamma_max), 0.0)
    return gamma if gamma.ndim else float(gamma)


def fuse(cloud: PrimitiveCloud, views: Sequence[CameraView], feature_maps: Sequence[FeatureMap],
         depth_tol: float = DEFAULT_DEPTH_TOL, eps: float = DEFAULT_EPS,
         gamma_max: float = DEFAULT_GAMMA_MAX, threads: int = 1) -> FusedFeatureCloud:
    if len(views) != len(feature_maps):
        raise ConfigError("every view needs exactly one feature map")
    if not views:
        raise PipelineError("no overlap between cameras and cloud: no views given")
    dims = {f.dim for f in feature_maps}
    if len(dims) != 1:
        raise ConfigError(f"feature maps disagree on dimension: {sorted(dims)}")
    d = dims.pop()
    n = len(cloud)
    m = len(views)
    order = sorted(range(m), key=lambda i: views[i].view_id)

    def work(i):
        return gather_observations(cloud, views[i], feature_maps[i], depth_tol)

    count = np.zeros(n, dtype=np.int64)
    mean = np.zeros((n, d))
    m2 = np.zeros((n, d))
    first = np.zeros((n, d))
    # gathering may run in parallel; the reduction below always follows view_id order
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool_exec:
        for samples, present in pool_exec.map(work, order):
            idx = np.flatnonzero(present)
            x = samples[idx]
            fresh = idx[count[idx] == 0]
            first[fresh] = samples[fresh]
            count[idx] += 1
            delta = x - mean[idx]
            mean[idx] += delta / count[idx, None]
            m2[idx] += delta * (x - mean[idx])

    valid = count > 0
    if not valid.any():
        raise PipelineError("no overlap between cameras and cloud")
    norms = np.linalg.norm(mean, axis=1)
    features = np.zeros((n, d))
    good = valid & (norms >= 1e-12)
    features[good] = mean[good] / norms[good, None]
    degenerate = valid & ~good
    features[degenerate] = first[degenerate]
    if degenerate.any():
        log.info("fuse: %d primitives had zero-mean samples", int(degenerate.sum()))
    var = np.where(valid[:, None], m2 / np.maximum(count, 1)[:, None], 0.0)
    var = np.maximum(var, 0.0)
    gamma = confidence(count, m, var, eps, gamma_max)
    log.info("fuse: %d/%d primitives observed across %d views", int(valid.sum()), n, m)
    return FusedFeatureCloud(features, np.asarray(gamma, dtype=np.float64), count)
