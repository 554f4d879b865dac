"""Open-vocabulary classification, voting and panoptic assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .graph_clustering import InstancePartition
from .supersegment import SuperPrimitivePartition

VOID = -1
KINDS = ("thing", "stuff")


@dataclass
class QueryEntry:
    name: str
    embedding: np.ndarray
    kind: str = "thing"


@dataclass
class QuerySet:
    entries: list

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("query set must not be empty")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ConfigError("query names must be unique")
        dims = set()
        for e in self.entries:
            e.embedding = np.asarray(e.embedding, dtype=np.float64)
            dims.add(e.embedding.shape)
            if e.kind not in KINDS:
                raise ConfigError(f"query {e.name!r}: kind must be 'thing' or 'stuff'")
            if abs(np.linalg.norm(e.embedding) - 1.0) > 1e-4:
                raise ConfigError(f"query {e.name!r}: embedding is not unit length")
        if len(dims) != 1:
            raise ConfigError("query embeddings disagree on dimension")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([e.embedding for e in self.entries])

    def is_stuff(self, cls: int) -> bool:
        return cls >= 0 and self.entries[cls].kind == "stuff"

    def index(self, name: str) -> int:
        for i, e in enumerate(self.entries):
            if e.name == name:
                return i
        raise KeyError(f"unknown query {name!r}")


def classify(features: np.ndarray, queries: QuerySet, min_similarity: Optional[float] = None):
    """Per-primitive argmax class by cosine similarity (ties to the lower index).

    Returns ``(classes, best_similarity, similarity_matrix)``. With
    ``min_similarity`` set, primitives below it become :data:`VOID`.
    """
    emb = queries.embeddings
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    sims = (feats / np.where(norms > 0, norms, 1.0)) @ emb.T
    classes = np.argmax(sims, axis=1).astype(np.int64)
    best = sims[np.arange(len(classes)), classes]
    if min_similarity is not None:
        classes[best < min_similarity] = VOID
    return classes, best, sims


def _weighted_mode(groups: np.ndarray, classes: np.ndarray, weights: np.ndarray, n_groups: int,
                   n_classes: int) -> np.ndarray:
    keep = classes >= 0
    table = np.zeros((n_groups, max(n_classes, 1)))
    np.add.at(table, (groups[keep], classes[keep]), weights[keep])
    winner = np.argmax(table, axis=1).astype(np.int64)
    winner[table.max(axis=1) <= 0] = VOID
    return winner


def vote(labels: np.ndarray, classes: np.ndarray, n_classes: Optional[int] = None):
    """Modal member class per super-primitive; returns ``(super_classes, relabeled_classes)``."""
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    n_seg = int(labels.max()) + 1 if labels.size else 0
    n_cls = n_classes if n_classes is not None else int(classes.max()) + 1 if classes.size else 0
    winner = _weighted_mode(labels, classes, np.ones(len(labels)), n_seg, n_cls)
    return winner, winner[labels]


@dataclass
class InstanceInfo:
    id: int
    class_index: int
    kind: str
    count: int
    mean_similarity: float = float("nan")


@dataclass
class PanopticLabeling:
    instance: np.ndarray
    semantic: np.ndarray
    instances: list = field(default_factory=list)

    @classmethod
    def from_arrays(cls, instance, semantic, queries: Optional[QuerySet] = None,
                    similarity: Optional[np.ndarray] = None) -> "PanopticLabeling":
        instance = np.asarray(instance, dtype=np.int64)
        semantic = np.asarray(semantic, dtype=np.int64)
        infos = []
        for iid in np.unique(instance[instance >= 0]):
            members = np.flatnonzero(instance == iid)
            cls_vals = np.unique(semantic[members])
            c = int(cls_vals[0]) if cls_vals.size == 1 else int(np.bincount(semantic[members][semantic[members] >= 0]).argmax())
            kind = queries.entries[c].kind if (queries is not None and c >= 0) else "thing"
            sim = float(np.mean(similarity[members, c])) if (similarity is not None and c >= 0) else float("nan")
            infos.append(InstanceInfo(int(iid), c, kind, int(members.size), sim))
        return cls(instance, semantic, infos)

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    def things(self) -> list[InstanceInfo]:
        return [i for i in self.instances if i.kind == "thing"]


def assemble(instances: InstancePartition, super_classes: np.ndarray, partition: SuperPrimitivePartition,
             queries: QuerySet, similarity: Optional[np.ndarray] = None) -> PanopticLabeling:
    """Per-instance weighted-mode class, stuff merged per class, consecutive ids by first primitive."""
    inst_of_super = np.asarray(instances.labels, dtype=np.int64)
    super_classes = np.asarray(super_classes, dtype=np.int64)
    if inst_of_super.shape[0] != partition.n_segments:
        raise ConfigError("instance partition must cover every super-primitive")
    n_inst = instances.n_instances
    inst_class = _weighted_mode(inst_of_super, super_classes, partition.counts.astype(np.float64),
                                n_inst, len(queries))
    # region key: stuff instances collapse onto their class
    region_key = [("stuff", int(c)) if queries.is_stuff(int(c)) else ("inst", g) for g, c in enumerate(inst_class)]
    prim_inst = inst_of_super[partition.labels]
    prim_class = inst_class[prim_inst]
    ids: dict = {}
    out_ids = np.full(len(prim_inst), VOID, dtype=np.int64)
    for i, g in enumerate(prim_inst.tolist()):
        if inst_class[g] == VOID:
            continue
        key = region_key[g]
        out_ids[i] = ids.setdefault(key, len(ids))
    return PanopticLabeling.from_arrays(out_ids, prim_class, queries, similarity)


def text_query(labeling: PanopticLabeling, queries: QuerySet, query_name: str) -> list[int]:
    """Thing instances voted into the named class, by mean similarity (descending), then id."""
    cls = queries.index(query_name)
    hits = [i for i in labeling.instances if i.class_index == cls and i.kind == "thing"]
    hits.sort(key=lambda i: (-(i.mean_similarity if np.isfinite(i.mean_similarity) else -np.inf), i.id))
    return [i.id for i in hits]
