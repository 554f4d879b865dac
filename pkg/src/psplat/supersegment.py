"""Language-guided graph cuts: group primitives into super-primitives.

Two regions merge when both their aggregate normals and their aggregate
language features agree beyond the current iteration's thresholds. Aggregates
are confidence-weighted means of member primitives, renormalised after each
union.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .geometry import AdjacencyGraph

log = logging.getLogger(__name__)


def merge_predicate(n_i, n_j, f_i, f_j, lambda_n: float, lambda_f: float) -> bool:
    return bool(np.dot(n_i, n_j) > lambda_n and np.dot(f_i, f_j) > lambda_f)


def _linspace_angles(start_deg: float, end_deg: float, steps: int) -> list[float]:
    return [float(np.cos(np.deg2rad(a))) for a in np.linspace(start_deg, end_deg, steps)]


@dataclass
class CutSchedule:
    lambda_n: Sequence[float]
    lambda_f: Sequence[float]
    min_size: int = 20

    def __post_init__(self):
        self.lambda_n = [float(x) for x in self.lambda_n]
        self.lambda_f = [float(x) for x in self.lambda_f]
        if len(self.lambda_n) != len(self.lambda_f) or not self.lambda_n:
            raise ConfigError("normal and feature schedules need the same, non-zero length")
        for name, seq in (("lambda_n", self.lambda_n), ("lambda_f", self.lambda_f)):
            if any(not (-1.0 < x <= 1.0) for x in seq):
                raise ConfigError(f"{name} thresholds must lie in (-1, 1]")
            if any(b > a for a, b in zip(seq, seq[1:])):
                raise ConfigError(f"{name} schedule must be non-increasing")
        if self.min_size < 1:
            raise ConfigError("min_size must be >= 1")

    @property
    def iterations(self) -> int:
        return len(self.lambda_n)

    @classmethod
    def default(cls, iterations: int = 4, normal_deg=(15.0, 40.0), feature=(0.95, 0.80),
                min_size: int = 20) -> "CutSchedule":
        return cls(
            _linspace_angles(normal_deg[0], normal_deg[1], iterations),
            [float(x) for x in np.linspace(feature[0], feature[1], iterations)],
            min_size,
        )

    @classmethod
    def constant(cls, lambda_n: float, lambda_f: float, iterations: int = 1, min_size: int = 1) -> "CutSchedule":
        return cls([lambda_n] * iterations, [lambda_f] * iterations, min_size)


@dataclass
class SuperPrimitivePartition:
    """``labels[i]`` is the consecutive segment id of primitive ``i``."""

    labels: np.ndarray
    counts: np.ndarray
    normals: np.ndarray
    features: np.ndarray
    mass: Optional[np.ndarray] = None

    @property
    def n_segments(self) -> int:
        return int(self.counts.shape[0])

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(self.counts)[:-1]
        return np.split(order, bounds)


class _Forest:
    """Union-find whose root is always the lowest member index."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if a > b:
            a, b = b, a
        self.parent[b] = a
        return a


def _unit(v: np.ndarray) -> Optional[np.ndarray]:
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else None


def segment(normals: np.ndarray, features: np.ndarray, adj: AdjacencyGraph, sched: CutSchedule,
            confidences: Optional[np.ndarray] = None, use_language: bool = True) -> SuperPrimitivePartition:
    """Run the scheduled graph-cut passes and the small-segment cleanup.

    ``use_language=False`` drops the feature test from the merge rule (the
    normal-only ablation).
    """
    normals = np.asarray(normals, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    n = normals.shape[0]
    if features.shape[0] != n or adj.n != n:
        raise ConfigError("normals, features and adjacency must cover the same primitives")
    w = np.ones(n) if confidences is None else np.asarray(confidences, dtype=np.float64)
    w = np.where(w > 0, w, 0.0)

    # weighted sums (confidence) and plain sums (fallback when a region has zero mass)
    wn = normals * w[:, None]
    wf = features * w[:, None]
    un = normals.copy()
    uf = features.copy()
    mass = w.copy()
    count = np.ones(n, dtype=np.int64)
    agg_n = [row for row in normals]
    agg_f = [row for row in features]
    forest = _Forest(n)

    def merge(ra: int, rb: int) -> int:
        root = forest.union(ra, rb)
        other = rb if root == ra else ra
        wn[root] += wn[other]
        wf[root] += wf[other]
        un[root] += un[other]
        uf[root] += uf[other]
        mass[root] += mass[other]
        count[root] += count[other]
        src_n, src_f = (wn[root], wf[root]) if mass[root] > 0 else (un[root], uf[root])
        nn = _unit(src_n)
        ff = _unit(src_f)
        # a cancelling mean keeps the larger side's aggregate
        keep = root if count[root] - count[other] >= count[other] else other
        agg_n[root] = nn if nn is not None else agg_n[keep]
        agg_f[root] = ff if ff is not None else agg_f[keep]
        return root

    edges = adj.edges.tolist()
    for t in range(sched.iterations):
        lam_n = sched.lambda_n[t]
        lam_f = sched.lambda_f[t]
        merges = 0
        for i, j in edges:
            ri = forest.find(i)
            rj = forest.find(j)
            if ri == rj:
                continue
            if float(agg_n[ri] @ agg_n[rj]) <= lam_n:
                continue
            if use_language and float(agg_f[ri] @ agg_f[rj]) <= lam_f:
                continue
            merge(ri, rj)
            merges += 1
        log.debug("segment pass %d: %d merges (lambda_n=%.4f lambda_f=%.4f)", t, merges, lam_n, lam_f)

    if sched.min_size > 1:
        _absorb_small(forest, adj, count, agg_n, sched.min_size, merge)

    roots = np.array([forest.find(i) for i in range(n)], dtype=np.int64)
    uniq, labels = np.unique(roots, return_inverse=True)
    out_n = np.stack([agg_n[r] for r in uniq])
    out_f = np.stack([agg_f[r] for r in uniq])
    return SuperPrimitivePartition(labels.astype(np.int64), count[uniq].copy(), out_n, out_f, mass[uniq].copy())


def _absorb_small(forest: _Forest, adj: AdjacencyGraph, count, agg_n, min_size: int, merge) -> None:
    n = adj.n
    members: dict[int, list[int]] = {}
    for i in range(n):
        members.setdefault(forest.find(i), []).append(i)
    changed = True
    while changed:
        changed = False
        for r in sorted(members):
            if r not in members or forest.find(r) != r or count[r] >= min_size:
                continue
            nbr_roots = set()
            for i in members[r]:
                for j in adj.neighbors(i):
                    q = forest.find(int(j))
                    if q != r:
                        nbr_roots.add(q)
            if not nbr_roots:
                continue
            best = max(sorted(nbr_roots), key=lambda q: float(agg_n[r] @ agg_n[q]))
            # max() keeps the first maximum, i.e. the lowest root on ties
            root = merge(r, best)
            other = best if root == r else r
            members[root] = members[root] + members.pop(other)
            changed = True
