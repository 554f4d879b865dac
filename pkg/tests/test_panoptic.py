import numpy as np
import pytest

from psplat.errors import ConfigError
from psplat.graph_clustering import InstancePartition
from psplat.panoptic import VOID, QueryEntry, QuerySet, assemble, classify, text_query, vote
from psplat.supersegment import SuperPrimitivePartition


def queries(names=("chair", "table", "floor", "wall"), kinds=("thing", "thing", "stuff", "stuff"), dim=4):
    eye = np.eye(dim)
    return QuerySet([QueryEntry(n, eye[i], k) for i, (n, k) in enumerate(zip(names, kinds))])


def partition(labels):
    labels = np.asarray(labels)
    counts = np.bincount(labels)
    n = len(counts)
    return SuperPrimitivePartition(labels, counts, np.tile([0, 0, 1.0], (n, 1)), np.tile([1.0, 0], (n, 1)))


def test_queryset_invariants():
    with pytest.raises(ConfigError):
        QuerySet([])
    with pytest.raises(ConfigError):
        QuerySet([QueryEntry("a", [1.0, 0]), QueryEntry("a", [0, 1.0])])
    with pytest.raises(ConfigError):
        QuerySet([QueryEntry("a", [2.0, 0])])
    with pytest.raises(ConfigError):
        QuerySet([QueryEntry("a", [1.0, 0], "other")])
    with pytest.raises(ConfigError):
        QuerySet([QueryEntry("a", [1.0, 0]), QueryEntry("b", [0, 0, 1.0])])


def test_classify_argmax_and_ties():
    q = queries()
    feats = np.array([[0.9, 0.1, 0, 0], [0, 0, 0, 1.0], [1, 1, 0, 0]])
    classes, best, sims = classify(feats, q)
    assert classes.tolist() == [0, 3, 0]  # tie goes to the lower index
    assert sims.shape == (3, 4)
    assert best[1] == pytest.approx(1.0)


def test_classify_min_similarity_gives_void():
    classes, _, _ = classify(np.array([[0.5, 0.5, 0.5, 0.5], [1.0, 0, 0, 0]]), queries(), min_similarity=0.9)
    assert classes.tolist() == [VOID, 0]


def test_classify_invariant_to_query_rescaling():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(4, 6))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    feats = rng.normal(size=(200, 6))
    base, _, _ = classify(feats, QuerySet([QueryEntry(str(i), e) for i, e in enumerate(emb)]))
    scaled = emb * np.array([[3.0], [0.2], [7.0], [1.5]])
    scaled /= np.linalg.norm(scaled, axis=1, keepdims=True)
    again, _, _ = classify(feats, QuerySet([QueryEntry(str(i), e) for i, e in enumerate(scaled)]))
    assert np.array_equal(base, again)


def test_vote_examples():
    sup, relabeled = vote([0, 0, 0, 1, 1, 2, 2], [2, 2, 3, 1, 4, 7, 7])
    assert sup.tolist() == [2, 1, 7]
    assert relabeled.tolist() == [2, 2, 2, 1, 1, 7, 7]


def test_vote_never_invents_a_class():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 10, size=300)
    classes = rng.integers(0, 6, size=300)
    sup, _ = vote(labels, classes)
    for s in range(10):
        assert sup[s] in set(classes[labels == s].tolist())


def test_assemble_single_instance():
    part = partition([0, 0, 0])
    lab = assemble(InstancePartition(np.array([0])), np.array([3]), part, queries())
    assert lab.semantic.tolist() == [3, 3, 3] and lab.instance.tolist() == [0, 0, 0]


def test_assemble_weighted_mode():
    part = partition([0] * 100 + [1] * 10)
    lab = assemble(InstancePartition(np.array([0, 0])), np.array([1, 0]), part, queries())
    assert set(lab.semantic.tolist()) == {1}
    assert lab.n_instances == 1


def test_assemble_merges_stuff_keeps_things_distinct():
    q = queries()
    part = partition([0, 0, 1, 1, 2, 3])
    lab = assemble(InstancePartition(np.array([0, 1, 2, 3])), np.array([3, 3, 0, 0]), part, q)
    assert lab.instance.tolist() == [0, 0, 0, 0, 1, 2]
    kinds = {i.id: i.kind for i in lab.instances}
    assert kinds == {0: "stuff", 1: "thing", 2: "thing"}
    # class constant within every instance
    for info in lab.instances:
        assert set(lab.semantic[lab.instance == info.id].tolist()) == {info.class_index}


def test_assemble_requires_full_cover():
    with pytest.raises(ConfigError):
        assemble(InstancePartition(np.array([0])), np.array([0, 0]), partition([0, 1]), queries())


def test_text_query():
    q = queries()
    part = partition([0, 1, 2, 3])
    sims = np.array([[0.7, 0, 0, 0], [0.9, 0, 0, 0], [0, 0.8, 0, 0], [0, 0, 0, 1.0]])
    lab = assemble(InstancePartition(np.array([0, 1, 2, 3])), np.array([0, 0, 1, 3]), part, q, sims)
    assert text_query(lab, q, "chair") == [1, 0]  # ranked by similarity
    assert text_query(lab, q, "table") == [2]
    assert text_query(lab, q, "wall") == []  # stuff is not an instance query
    with pytest.raises(KeyError):
        text_query(lab, q, "sofa")
