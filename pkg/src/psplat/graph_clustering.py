"""Instance clustering of super-primitives from multi-view 2D mask consensus.

For every view, the visible members of a vertex hit mask labels; their
normalised histogram is the vertex's label distribution in that view. Two
vertices are similar in a view when their distributions are close in
Jensen-Shannon divergence (base 2). Views are averaged with weights equal to
the visible fraction of each vertex, and vertices are merged over a schedule
of decreasing thresholds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .geometry import DEFAULT_DEPTH_TOL, AdjacencyGraph, CameraView, observe

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.9, 0.8, 0.7, 0.6)


def linear_schedule(start: float = 0.9, end: float = 0.6, steps: int = 4) -> tuple[float, ...]:
    """Evenly spaced thresholds, rounded so (0.9, 0.6, 4) gives exactly 0.9, 0.8, 0.7, 0.6."""
    if steps == 1:
        return (float(start),)
    return tuple(round(start + (end - start) * i / (steps - 1), 12) for i in range(steps))


@dataclass
class MaskLabelDistribution:
    probs: dict
    visible_count: int
    vertex: int = -1
    view: int = -1

    def __post_init__(self):
        if self.visible_count == 0 and self.probs:
            raise ConfigError("a distribution without visible hits must be empty")


def mask_distribution(members: np.ndarray, positions: np.ndarray, view: CameraView, mask: np.ndarray,
                      depth_tol: float = DEFAULT_DEPTH_TOL, vertex: int = -1) -> MaskLabelDistribution:
    """Label histogram of a vertex's visible members in one mask raster (label 0 dropped)."""
    mask = np.asarray(mask)
    if mask.shape != (view.height, view.width):
        raise ConfigError(f"view {view.view_id}: mask shape {mask.shape} does not match the view")
    members = np.asarray(members, dtype=np.int64)
    obs = observe(positions[members], view, depth_tol)
    labels = mask[obs.row[obs.visible], obs.col[obs.visible]]
    labels = labels[labels != 0]
    if labels.size == 0:
        return MaskLabelDistribution({}, 0, vertex, view.view_id)
    ids, counts = np.unique(labels, return_counts=True)
    total = int(counts.sum())
    return MaskLabelDistribution({int(i): c / total for i, c in zip(ids, counts)}, total, vertex, view.view_id)


def jsd(q_i: dict, q_j: dict) -> Optional[float]:
    """Base-2 Jensen-Shannon divergence of two sparse distributions; ``None`` if either is empty."""
    if not q_i or not q_j:
        return None
    total = 0.0
    for z in sorted(set(q_i) | set(q_j)):
        a = q_i.get(z, 0.0)
        b = q_j.get(z, 0.0)
        y = (a + b) / 2.0
        ta = a * math.log2(a / y) if a > 0 else 0.0
        tb = b * math.log2(b / y) if b > 0 else 0.0
        total += ta + tb
    return min(max(total / 2.0, 0.0), 1.0)


def jsd_dense(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise base-2 JSD for dense probability arrays of shape (..., K)."""
    y = (p + q) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0) / np.where(y > 0, y, 1.0)), 0.0)
        tq = np.where(q > 0, q * np.log2(np.where(q > 0, q, 1.0) / np.where(y > 0, y, 1.0)), 0.0)
    return np.clip(np.sum(tp + tq, axis=-1) / 2.0, 0.0, 1.0)


def pair_affinity(obs_i: Sequence[MaskLabelDistribution], obs_j: Sequence[MaskLabelDistribution],
                  size_i: int, size_j: int) -> Optional[float]:
    """Visibility-weighted mean of ``1 - jsd`` over views where both vertices have hits.

    ``obs_i`` and ``obs_j`` are aligned per view. Returns ``None`` when no view
    carries evidence for both.
    """
    terms = []
    for a, b in zip(obs_i, obs_j):
        if a.visible_count == 0 or b.visible_count == 0:
            continue
        d = jsd(a.probs, b.probs)
        terms.append((a.visible_count / size_i) * (b.visible_count / size_j) * (1.0 - d))
    if not terms:
        return None
    return sum(terms) / len(terms)


def candidate_edges(labels: np.ndarray, adj: AdjacencyGraph) -> np.ndarray:
    """Unique segment pairs (A < B) joined by at least one primitive edge."""
    labels = np.asarray(labels, dtype=np.int64)
    if adj.edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    a = labels[adj.edges[:, 0]]
    b = labels[adj.edges[:, 1]]
    keep = a != b
    pairs = np.stack([np.minimum(a, b)[keep], np.maximum(a, b)[keep]], axis=1)
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0)


class MaskAffinity:
    """Affinity oracle over primitive-level mask hits.

    Per view, each primitive's mask label is looked up once (``-1`` when not
    visible, out of frame or unlabeled). Afterwards the affinity of any two
    groups of super-primitives is computed from label histograms.
    """

    def __init__(self, positions: np.ndarray, super_labels: np.ndarray, views: Sequence[CameraView],
                 masks: Sequence[np.ndarray], depth_tol: float = DEFAULT_DEPTH_TOL, use_depth: bool = True):
        if len(views) != len(masks):
            raise ConfigError("every view needs exactly one mask")
        self.super_labels = np.asarray(super_labels, dtype=np.int64)
        self.n_super = int(self.super_labels.max()) + 1 if self.super_labels.size else 0
        self.super_sizes = np.bincount(self.super_labels, minlength=self.n_super)
        self.hits = []
        order = sorted(range(len(views)), key=lambda i: views[i].view_id)
        for i in order:
            view, mask = views[i], np.asarray(masks[i])
            if mask.shape != (view.height, view.width):
                raise ConfigError(f"view {view.view_id}: mask shape {mask.shape} does not match the view")
            obs = observe(positions, view, depth_tol, use_depth=use_depth)
            lab = np.full(positions.shape[0], -1, dtype=np.int64)
            vis = obs.visible
            lab[vis] = mask[obs.row[vis], obs.col[vis]].astype(np.int64)
            lab[lab == 0] = -1
            hit = lab >= 0
            uniq, compact = np.unique(lab[hit], return_inverse=True)
            dense = np.full(positions.shape[0], -1, dtype=np.int64)
            dense[hit] = compact
            self.hits.append((dense, len(uniq)))

    def distributions(self, group_of_super: np.ndarray, n_groups: int):
        """Per view: (counts G x K, visible counts G)."""
        group = np.asarray(group_of_super, dtype=np.int64)[self.super_labels]
        out = []
        for dense, k in self.hits:
            hit = dense >= 0
            counts = np.zeros((n_groups, max(k, 1)))
            if k:
                np.add.at(counts, (group[hit], dense[hit]), 1.0)
            out.append((counts, counts.sum(axis=1)))
        return out

    def __call__(self, groups: Sequence[np.ndarray], pairs: np.ndarray) -> np.ndarray:
        n_groups = len(groups)
        group_of_super = np.empty(self.n_super, dtype=np.int64)
        sizes = np.zeros(n_groups)
        for g, members in enumerate(groups):
            group_of_super[members] = g
            sizes[g] = self.super_sizes[members].sum()
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        total = np.zeros(len(pairs))
        k = np.zeros(len(pairs))
        a, b = pairs[:, 0], pairs[:, 1]
        for counts, vis in self.distributions(group_of_super, n_groups):
            both = (vis[a] > 0) & (vis[b] > 0)
            if not both.any():
                continue
            pa = counts[a[both]] / vis[a[both], None]
            pb = counts[b[both]] / vis[b[both], None]
            aff = 1.0 - jsd_dense(pa, pb)
            total[both] += (vis[a[both]] / sizes[a[both]]) * (vis[b[both]] / sizes[b[both]]) * aff
            k[both] += 1
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(k > 0, total / np.maximum(k, 1), np.nan)


@dataclass
class InstancePartition:
    labels: np.ndarray
    history: list = field(default_factory=list)

    @property
    def n_instances(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _relabel(roots: Sequence[int]) -> np.ndarray:
    """Consecutive ids ordered by first appearance."""
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(r, len(mapping)) for r in roots], dtype=np.int64)


AffinityFn = Callable[[Sequence[np.ndarray], np.ndarray], np.ndarray]


def progressive_cluster(n_vertices: int, pairs: np.ndarray, affinity: AffinityFn,
                        thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> InstancePartition:
    """Merge vertices over decreasing thresholds.

    ``affinity(groups, group_pairs)`` returns one value per pair (NaN = no
    evidence), where ``groups[g]`` lists the vertex ids of current group ``g``.
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(b >= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError(f"clustering thresholds must be strictly decreasing, got {thresholds}")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    group = np.arange(n_vertices, dtype=np.int64)
    history = []
    for it, thr in enumerate(thresholds, start=1):
        groups = [np.flatnonzero(group == g) for g in range(int(group.max()) + 1)] if n_vertices else []
        gp = np.stack([group[pairs[:, 0]], group[pairs[:, 1]]], axis=1) if len(pairs) else np.zeros((0, 2), np.int64)
        gp = np.sort(gp, axis=1)
        gp = gp[gp[:, 0] != gp[:, 1]]
        gp = np.unique(gp, axis=0) if len(gp) else gp
        aff = np.asarray(affinity(groups, gp), dtype=np.float64) if len(gp) else np.zeros(0)
        ok = np.flatnonzero(np.nan_to_num(aff, nan=-np.inf) > thr)
        order = ok[np.lexsort((gp[ok, 1], gp[ok, 0], -aff[ok]))]
        parent = list(range(len(groups)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        merges = 0
        for p in order:
            ra, rb = find(int(gp[p, 0])), find(int(gp[p, 1]))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
                merges += 1
        roots = [find(g) for g in range(len(groups))]
        group = _relabel(roots)[group] if len(groups) else group
        n_now = int(group.max()) + 1 if n_vertices else 0
        history.append({"iteration": it, "threshold": thr, "candidates": int(len(gp)),
                        "merges": merges, "instances": n_now})
        log.debug("cluster iteration %d (threshold %.2f): %d merges, %d instances", it, thr, merges, n_now)
    return InstancePartition(_relabel(group.tolist()), history)
