import itertools
import math

import numpy as np
import pytest

from psplat.metrics import MATCH_IOU, EvaluationError, GroundTruth, class_segments, evaluate, iou_matrix, macc, miou, prq
from psplat.panoptic import PanopticLabeling

KINDS = ("thing", "thing", "stuff", "stuff")


def gt_of(semantic, instance, kinds=KINDS):
    return GroundTruth(np.array(semantic), np.array(instance), kinds)


def pred_of(instance, semantic):
    return PanopticLabeling.from_arrays(instance, semantic)


def test_miou_examples():
    gt = gt_of([0, 0, 1, 1], [0, 0, 1, 1])
    assert miou([0, 0, 1, 1], gt)[0] == 1.0
    assert miou([1, 1, 0, 0], gt)[0] == 0.0
    one = gt_of([0, 0, 0, 0], [0, 0, 0, 0])
    assert miou([0, 0, 1, 1], one)[0] == 0.5


def test_unlabeled_gt_excluded():
    gt = gt_of([0, -1, 0], [0, -1, 0])
    assert miou([0, 1, 0], gt)[0] == 1.0
    with pytest.raises(EvaluationError):
        miou([0], gt_of([-1], [-1]))
    with pytest.raises(EvaluationError):
        miou([0, 0], gt)


def test_macc_examples():
    gt = gt_of([0, 0, 1, 1], [0, 0, 1, 1])
    assert macc([0, 0, 1, 1], gt)[0] == 1.0
    assert macc([0, 0, 0, 0], gt)[0] == 0.5
    gt2 = gt_of([0, 0, 0, 0, 1, 1], [0] * 4 + [1] * 2)
    assert macc([0, 0, 0, 1, 1, 0], gt2)[0] == 0.625


def confusion_oracle(pred, gt, n):
    cm = np.zeros((n, n), dtype=np.int64)
    for p, g in zip(pred, gt):
        if g >= 0:
            cm[g, p] += 1
    present = [c for c in range(n) if cm[c].sum() > 0]
    ious = [cm[c, c] / (cm[c].sum() + cm[:, c].sum() - cm[c, c]) for c in present]
    accs = [cm[c, c] / cm[c].sum() for c in present]
    return np.mean(ious), np.mean(accs)


def test_miou_macc_match_confusion_matrix():
    rng = np.random.default_rng(0)
    for _ in range(10):
        g = rng.integers(-1, 4, size=1000)
        p = rng.integers(0, 4, size=1000)
        gt = gt_of(g, np.zeros(1000, dtype=int))
        mi, ma = confusion_oracle(p, g, 4)
        assert miou(p, gt)[0] == pytest.approx(mi, abs=1e-12)
        assert macc(p, gt)[0] == pytest.approx(ma, abs=1e-12)


def test_prq_perfect():
    gt = gt_of([0, 0, 0, 1, 2, 2, 3], [0, 0, 1, 2, 3, 4, 5])
    pt, ps, _ = prq(gt.as_labeling(), gt)
    assert pt == 1.0 and ps == 1.0


def test_prq_split_instance_scores_zero():
    gt = gt_of([0] * 4, [0] * 4)
    pt, _, detail = prq(pred_of([0, 0, 1, 1], [0] * 4), gt)
    assert pt == 0.0
    assert (detail[0]["tp"], detail[0]["fp"], detail[0]["fn"]) == (0, 2, 1)


def test_prq_single_match_08():
    gt = gt_of([0] * 5 + [-1] * 5, [0] * 5 + [-1] * 5)
    # prediction covers 4 of 5 GT primitives plus nothing else labeled: IoU 0.8
    pt, ps, _ = prq(pred_of([0, 0, 0, 0, -1] + [0] * 5, [0, 0, 0, 0, 1] + [0] * 5), gt)
    assert pt == pytest.approx(0.8, abs=1e-15)
    assert math.isnan(ps)


def brute_prq(pred, gt):
    per = {}
    for c in np.unique(gt.semantic[gt.labeled]):
        preds, gts = class_segments(pred, gt, int(c))
        m = iou_matrix(preds, gts)
        best = (0, [])
        # every partial injection of preds into gts
        n, k = len(preds), len(gts)
        for r in range(min(n, k) + 1):
            for ps in itertools.combinations(range(n), r):
                for gs in itertools.permutations(range(k), r):
                    ious = [m[a, b] for a, b in zip(ps, gs)]
                    if all(v > MATCH_IOU for v in ious) and (r > best[0] or (r == best[0] and math.fsum(ious) > math.fsum(best[1]))):
                        best = (r, ious)
        tp, ious = best
        denom = tp + 0.5 * (n - tp) + 0.5 * (k - tp)
        per[int(c)] = (math.fsum(ious) / denom, gt.kinds[int(c)])
    th = [v for v, kind in per.values() if kind == "thing"]
    st = [v for v, kind in per.values() if kind == "stuff"]
    return (math.fsum(th) / len(th) if th else float("nan"), math.fsum(st) / len(st) if st else float("nan"))


def random_scene(rng, n=60):
    n_inst = int(rng.integers(1, 7))
    inst_class = rng.integers(0, 4, size=n_inst)
    g_inst = rng.integers(0, n_inst, size=n)
    g_sem = inst_class[g_inst]
    unl = rng.random(n) < 0.1
    g_sem = np.where(unl, -1, g_sem)
    g_inst = np.where(unl, -1, g_inst)
    gt = gt_of(g_sem, g_inst)
    # prediction: GT with some primitives reassigned
    p_inst = g_inst.copy()
    p_sem = g_sem.copy()
    flip = rng.random(n) < rng.uniform(0, 0.5)
    p_inst[flip] = rng.integers(0, n_inst + 2, size=flip.sum())
    extra = np.concatenate([inst_class, rng.integers(0, 4, size=2)])
    p_sem[flip] = extra[p_inst[flip]]
    p_sem[p_inst < 0] = 0
    p_inst[p_inst < 0] = 0
    return pred_of(p_inst, p_sem), gt


def test_prq_matches_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(40):
        pred, gt = random_scene(rng)
        pt, ps, _ = prq(pred, gt)
        bt, bs = brute_prq(pred, gt)
        assert (pt == bt) or (math.isnan(pt) and math.isnan(bt))
        assert (ps == bs) or (math.isnan(ps) and math.isnan(bs))


def test_metrics_invariant_to_instance_relabeling():
    rng = np.random.default_rng(3)
    for _ in range(10):
        pred, gt = random_scene(rng)
        perm = rng.permutation(int(pred.instance.max()) + 1)
        moved = pred_of(perm[pred.instance], pred.semantic)
        a, b = evaluate(pred, gt), evaluate(moved, gt)
        assert a.to_json() == b.to_json()


def test_report_serialisation():
    gt = gt_of([0, 0, 2, 2], [0, 0, 1, 1])
    rep = evaluate(gt.as_labeling(), gt)
    assert rep.miou == rep.macc == rep.prq_thing == rep.prq_stuff == 1.0
    assert '"prq_thing": 1.0' in rep.to_json()
    assert rep.to_text().splitlines()[1].startswith("miou")
