"""Pyramid tri-plane language field with an MLP decoder, trained by hand-written backprop.

A position is normalised into the scene box, each level's three axis-aligned
planes (xy, yz, xz) are bilinearly sampled and the C-vectors are concatenated
plane by plane, level by level (coarse to fine). The decoder maps that code
to a unit language feature. Training minimises the confidence-weighted
``1 - cos`` between decoded and fused features with Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, PipelineError
from .fusion import FusedFeatureCloud
from .geometry import PrimitiveCloud

log = logging.getLogger(__name__)

# plane name -> indices of the two normalised coordinates it is sampled with
PLANE_AXES = (("xy", (0, 1)), ("yz", (1, 2)), ("xz", (0, 2)))
NODE_SNAP = 1e-9


@dataclass
class PyramidTriPlane:
    """``planes[l]`` has shape (3, R_l, R_l, C) in xy, yz, xz order."""

    planes: list
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __post_init__(self):
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        if np.any(self.aabb_max - self.aabb_min <= 0):
            raise ConfigError("tri-plane bounds need positive extent on every axis")
        res = self.resolutions
        if any(r < 2 for r in res) or any(b <= a for a, b in zip(res, res[1:])):
            raise ConfigError(f"plane resolutions must be >= 2 and strictly increasing, got {res}")
        chans = {p.shape[-1] for p in self.planes}
        if len(chans) != 1:
            raise ConfigError("all levels must share the channel count")

    @classmethod
    def create(cls, aabb_min, aabb_max, resolutions: Sequence[int] = (64, 128, 256), channels: int = 8,
               rng: Optional[np.random.Generator] = None, init_scale: float = 1e-4) -> "PyramidTriPlane":
        rng = rng if rng is not None else np.random.default_rng(0)
        planes = [rng.uniform(-init_scale, init_scale, size=(3, r, r, channels)) for r in resolutions]
        return cls(planes, aabb_min, aabb_max)

    @classmethod
    def for_positions(cls, positions: np.ndarray, margin: float = 0.05, **kwargs) -> "PyramidTriPlane":
        """Field whose box is the points' bounds grown by ``margin`` of the extent per side."""
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        extent = np.maximum(hi - lo, 1e-3)
        return cls.create(lo - margin * extent, hi + margin * extent, **kwargs)

    @property
    def levels(self) -> int:
        return len(self.planes)

    @property
    def channels(self) -> int:
        return self.planes[0].shape[-1]

    @property
    def resolutions(self) -> list[int]:
        return [p.shape[1] for p in self.planes]

    @property
    def code_dim(self) -> int:
        return 3 * self.channels * self.levels

    def normalize(self, positions: np.ndarray) -> np.ndarray:
        t = (np.asarray(positions, dtype=np.float64) - self.aabb_min) / (self.aabb_max - self.aabb_min)
        return np.clip(t, 0.0, 1.0)


def _corners(t: np.ndarray, res: int) -> tuple[np.ndarray, np.ndarray]:
    a = t * (res - 1)
    snapped = np.round(a)
    a = np.where(np.abs(a - snapped) < NODE_SNAP, snapped, a)
    i0 = np.minimum(np.floor(a).astype(np.int64), res - 2)
    return i0, a - i0


def _interp_plan(field_: PyramidTriPlane, positions: np.ndarray):
    """Flat node indices (B, 4) and weights (B, 4) for every (level, plane)."""
    t = field_.normalize(np.atleast_2d(positions))
    plan = []
    for res in field_.resolutions:
        level = []
        for _, (u, v) in PLANE_AXES:
            i0, fa = _corners(t[:, u], res)
            j0, fb = _corners(t[:, v], res)
            idx = np.stack([i0 * res + j0, (i0 + 1) * res + j0, i0 * res + j0 + 1, (i0 + 1) * res + j0 + 1], axis=1)
            w = np.stack([(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb], axis=1)
            level.append((idx, w))
        plan.append(level)
    return plan


def query_latent(field_: PyramidTriPlane, positions: np.ndarray, _plan=None) -> np.ndarray:
    """Latent codes (B, 3*C*L) for world positions (B, 3); a single 3-vector gives (3*C*L,)."""
    single = np.asarray(positions).ndim == 1
    plan = _plan if _plan is not None else _interp_plan(field_, positions)
    parts = []
    for planes, level in zip(field_.planes, plan):
        res = planes.shape[1]
        for p, (idx, w) in enumerate(level):
            flat = planes[p].reshape(res * res, -1)
            parts.append(np.einsum("bk,bkc->bc", w, flat[idx]))
    code = np.concatenate(parts, axis=1)
    return code[0] if single else code


@dataclass
class FeatureDecoder:
    """Two ReLU hidden layers and a linear output, followed by L2 normalisation."""

    weights: list
    biases: list

    @classmethod
    def create(cls, in_dim: int, hidden: int, out_dim: int,
               rng: Optional[np.random.Generator] = None) -> "FeatureDecoder":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [in_dim, hidden, hidden, out_dim]
        weights = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims, dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(weights, biases)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, codes: np.ndarray):
        if codes.shape[-1] != self.in_dim:
            raise ConfigError(f"decoder expects codes of width {self.in_dim}, got {codes.shape[-1]}")
        acts = [codes]
        pre = []
        h = codes
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < len(self.weights) - 1 else z
            acts.append(h)
        out = acts[-1]
        norm = np.linalg.norm(out, axis=1)
        zero = norm < 1e-12
        feat = np.zeros_like(out)
        feat[~zero] = out[~zero] / norm[~zero, None]
        feat[zero, 0] = 1.0
        return feat, (acts, pre, norm, zero)


def decode(dec: FeatureDecoder, g: np.ndarray) -> np.ndarray:
    """Unit feature(s) for latent code(s). A zero pre-normalisation output maps to e_1."""
    g = np.asarray(g, dtype=np.float64)
    single = g.ndim == 1
    feat, _ = dec.forward(np.atleast_2d(g))
    return feat[0] if single else feat


def parameters(field_: PyramidTriPlane, dec: FeatureDecoder) -> dict:
    params = {f"plane{l}": p for l, p in enumerate(field_.planes)}
    for i, (w, b) in enumerate(zip(dec.weights, dec.biases)):
        params[f"W{i}"] = w
        params[f"b{i}"] = b
    return params


def loss(field_: PyramidTriPlane, dec: FeatureDecoder, positions: np.ndarray, targets: np.ndarray,
         gammas: np.ndarray, need_grad: bool = True):
    """Confidence-weighted ``sum gamma * |1 - cos|`` and its parameter gradients.

    Returns ``(value, grads)``; ``grads`` maps the names from :func:`parameters`
    to arrays of the same shapes (``None`` when ``need_grad`` is false).
    """
    positions = np.atleast_2d(positions)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    gammas = np.asarray(gammas, dtype=np.float64).reshape(-1)
    if positions.shape[0] == 0:
        raise ConfigError("loss needs a non-empty batch")
    if np.any(gammas < 0):
        raise ConfigError("confidences must be non-negative")
    plan = _interp_plan(field_, positions)
    codes = query_latent(field_, positions, _plan=plan)
    feat, (acts, pre, norm, zero) = dec.forward(codes)
    tnorm = np.linalg.norm(targets, axis=1)
    tunit = targets / np.where(tnorm > 0, tnorm, 1.0)[:, None]
    cos = np.einsum("bd,bd->b", feat, tunit)
    value = float(np.sum(gammas * np.abs(1.0 - cos)))
    if not need_grad:
        return value, None

    grads = {}
    d_feat = -gammas[:, None] * tunit
    d_out = (d_feat - feat * np.einsum("bd,bd->b", feat, d_feat)[:, None]) / np.where(zero, 1.0, norm)[:, None]
    d_out[zero] = 0.0
    d_h = d_out
    n_layers = len(dec.weights)
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            d_h = d_h * (pre[i] > 0)
        grads[f"W{i}"] = acts[i].T @ d_h
        grads[f"b{i}"] = d_h.sum(axis=0)
        d_h = d_h @ dec.weights[i].T
    d_code = d_h

    c = field_.channels
    col = 0
    for l, (planes, level) in enumerate(zip(field_.planes, plan)):
        res = planes.shape[1]
        g_planes = np.zeros_like(planes)
        for p, (idx, w) in enumerate(level):
            dg = d_code[:, col:col + c]
            col += c
            contrib = w[:, :, None] * dg[:, None, :]
            flat_idx = (idx[:, :, None] * c + np.arange(c)).ravel()
            g_planes[p] = np.bincount(flat_idx, weights=contrib.ravel(), minlength=res * res * c).reshape(res, res, c)
        grads[f"plane{l}"] = g_planes
    return value, grads


class Adam:
    """Adaptive-moment descent over a dict of arrays updated in place."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self._tmp = {k: np.empty_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            g, m, v, tmp = grads[name], self.m[name], self.v[name], self._tmp[name]
            # in-place form of m = b1 m + (1-b1) g ; v = b2 v + (1-b2) g^2 ; p -= lr mhat / (sqrt(vhat) + eps)
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=tmp)
            m += tmp
            v *= self.beta2
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v += tmp
            np.divide(v, c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            self.params[name] -= tmp


@dataclass
class DistillConfig:
    iterations: int = 30000
    batch_size: int = 4096
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("distill iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("distill batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("distill lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam decay rates must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("distill eps must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown distill options: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DistillResult:
    field: PyramidTriPlane
    decoder: FeatureDecoder
    history: list = field(default_factory=list)
    full_history: list = field(default_factory=list)


def dataset_loss(field_: PyramidTriPlane, dec: FeatureDecoder, positions, targets, gammas,
                 chunk: int = 8192) -> float:
    total = 0.0
    for s in range(0, len(positions), chunk):
        value, _ = loss(field_, dec, positions[s:s + chunk], targets[s:s + chunk], gammas[s:s + chunk],
                        need_grad=False)
        total += value
    return total


def distill(field_: PyramidTriPlane, dec: FeatureDecoder, fused: FusedFeatureCloud, cloud: PrimitiveCloud,
            cfg: DistillConfig) -> DistillResult:
    """Fit field and decoder (in place) to the fused features.

    ``history`` holds the per-iteration batch loss divided by batch size;
    ``full_history`` the whole-dataset loss every ``cfg.eval_every`` iterations.
    """
    features = fused.features
    gammas = np.where(fused.valid, np.asarray(fused.confidence, dtype=np.float64), 0.0)
    positions = cloud.positions
    if dec.out_dim != features.shape[1]:
        raise ConfigError(f"decoder output {dec.out_dim} != feature dimension {features.shape[1]}")
    pool_idx = np.flatnonzero(gammas > 0)
    if pool_idx.size == 0:
        raise PipelineError("distillation needs at least one valid primitive")
    rng = np.random.default_rng(cfg.seed)
    params = parameters(field_, dec)
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    result = DistillResult(field_, dec)
    vp, vf, vg = positions[pool_idx], features[pool_idx], gammas[pool_idx]
    for it in range(1, cfg.iterations + 1):
        batch = rng.integers(0, pool_idx.size, size=cfg.batch_size)
        value, grads = loss(field_, dec, vp[batch], vf[batch], vg[batch])
        scale = 1.0 / cfg.batch_size
        for g in grads.values():
            g *= scale
        opt.step(grads)
        result.history.append(value * scale)
        if cfg.eval_every and it % cfg.eval_every == 0:
            result.full_history.append(dataset_loss(field_, dec, vp, vf, vg))
        if it % 500 == 0:
            log.debug("distill iter %d loss %.6f", it, value * scale)
    return result


def field_features(field_: PyramidTriPlane, dec: FeatureDecoder, positions: np.ndarray,
                   chunk: int = 8192) -> np.ndarray:
    out = []
    for s in range(0, len(positions), chunk):
        out.append(decode(dec, query_latent(field_, positions[s:s + chunk])))
    return np.concatenate(out, axis=0) if out else np.zeros((0, dec.out_dim))
