"""mIoU, mAcc and panoptic reconstruction quality (thing / stuff)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import PsplatError
from .panoptic import PanopticLabeling

MATCH_IOU = 0.5


class EvaluationError(PsplatError):
    exit_code = 1


@dataclass
class GroundTruth:
    semantic: np.ndarray
    instance: np.ndarray
    kinds: Sequence[str]
    class_names: Sequence[str] = ()

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape:
            raise EvaluationError("ground truth class and instance arrays differ in length")
        if np.any(self.semantic >= len(self.kinds)) or np.any(self.semantic < -1):
            raise EvaluationError("ground truth class index out of range")

    @property
    def labeled(self) -> np.ndarray:
        return self.semantic >= 0

    def is_stuff(self, c: int) -> bool:
        return self.kinds[c] == "stuff"

    def as_labeling(self) -> PanopticLabeling:
        """GT in prediction form: stuff collapses to one region per class."""
        inst = self.instance.copy()
        inst[~self.labeled] = -1
        ids = {}
        out = np.full_like(inst, -1)
        for i in range(len(inst)):
            c = int(self.semantic[i])
            if c < 0:
                continue
            key = ("stuff", c) if self.is_stuff(c) else ("inst", int(inst[i]))
            out[i] = ids.setdefault(key, len(ids))
        lab = PanopticLabeling.from_arrays(out, self.semantic)
        for info in lab.instances:
            info.kind = self.kinds[info.class_index]
        return lab


@dataclass
class EvalReport:
    miou: float
    macc: float
    prq_thing: float
    prq_stuff: float
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x
        return json.dumps(clean(asdict(self)), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"{'metric':<10}{'value':>10}"]
        for name in ("miou", "macc", "prq_thing", "prq_stuff"):
            lines.append(f"{name:<10}{getattr(self, name):>10.4f}")
        lines.append("")
        lines.append(f"{'class':<16}{'kind':<7}{'iou':>8}{'acc':>8}{'prq':>8}{'tp':>5}{'fp':>5}{'fn':>5}")
        for name, row in self.per_class.items():
            def fmt(v):
                return f"{v:>8.4f}" if v is not None and math.isfinite(v) else f"{'-':>8}"
            lines.append(f"{name:<16}{row['kind']:<7}{fmt(row.get('iou'))}{fmt(row.get('acc'))}"
                         f"{fmt(row.get('prq'))}{row.get('tp', 0):>5}{row.get('fp', 0):>5}{row.get('fn', 0):>5}")
        return "\n".join(lines) + "\n"


def _check(pred: np.ndarray, gt: GroundTruth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    if pred.shape != gt.semantic.shape:
        raise EvaluationError("prediction and ground truth cover different primitive sets")
    if not gt.labeled.any():
        raise EvaluationError("ground truth has no labeled primitive")
    return pred


def miou(pred_classes, gt: GroundTruth) -> tuple[float, dict]:
    pred = _check(pred_classes, gt)
    lab = gt.labeled
    p, g = pred[lab], gt.semantic[lab]
    ious = {}
    for c in np.unique(g):
        inter = np.sum((p == c) & (g == c))
        union = np.sum((p == c) | (g == c))
        ious[int(c)] = inter / union
    return float(np.mean(list(ious.values()))), ious


def macc(pred_classes, gt: GroundTruth) -> tuple[float, dict]:
    pred = _check(pred_classes, gt)
    lab = gt.labeled
    p, g = pred[lab], gt.semantic[lab]
    accs = {int(c): float(np.mean(p[g == c] == c)) for c in np.unique(g)}
    return float(np.mean(list(accs.values()))), accs


def _segments(ids: np.ndarray, classes: np.ndarray, c: int, stuff: bool) -> list[np.ndarray]:
    sel = classes == c
    if stuff:
        return [sel] if sel.any() else []
    out = []
    for i in np.unique(ids[sel & (ids >= 0)]):
        out.append(sel & (ids == i))
    return out


def class_segments(pred: PanopticLabeling, gt: GroundTruth, c: int):
    """Boolean masks (over labeled primitives) of predicted and GT segments of class ``c``."""
    lab = gt.labeled
    stuff = gt.is_stuff(c)
    pred_ids = np.asarray(pred.instance)[lab]
    pred_cls = np.asarray(pred.semantic)[lab]
    preds = [s for s in _segments(pred_ids, pred_cls, c, stuff) if s.any()]
    gts = _segments(gt.instance[lab], gt.semantic[lab], c, stuff)
    return preds, gts


def iou_matrix(preds: list, gts: list) -> np.ndarray:
    m = np.zeros((len(preds), len(gts)))
    for a, p in enumerate(preds):
        for b, g in enumerate(gts):
            union = np.sum(p | g)
            m[a, b] = np.sum(p & g) / union if union else 0.0
    return m


def prq(pred: PanopticLabeling, gt: GroundTruth) -> tuple[float, float, dict]:
    """Greedy matching at IoU > 0.5, per class ``sum IoU / (TP + FP/2 + FN/2)``.

    Thing and stuff scores average over classes present in the ground truth;
    a split with no such class scores NaN.
    """
    if len(pred.instance) != len(gt.semantic):
        raise EvaluationError("prediction and ground truth cover different primitive sets")
    detail = {}
    for c in np.unique(gt.semantic[gt.labeled]):
        c = int(c)
        preds, gts = class_segments(pred, gt, c)
        ious = iou_matrix(preds, gts)
        matched_p, matched_g, matched_iou = set(), set(), []
        for a, b in sorted(zip(*np.nonzero(ious > MATCH_IOU)), key=lambda ab: (-ious[ab], ab)):
            if a in matched_p or b in matched_g:
                continue
            matched_p.add(a)
            matched_g.add(b)
            matched_iou.append(float(ious[a, b]))
        tp = len(matched_p)
        fp = len(preds) - tp
        fn = len(gts) - tp
        denom = tp + 0.5 * fp + 0.5 * fn
        # fsum: correctly rounded, so the score does not depend on match order
        detail[c] = {"prq": math.fsum(matched_iou) / denom if denom else 0.0, "tp": tp, "fp": fp, "fn": fn,
                     "kind": gt.kinds[c]}
    things = [d["prq"] for d in detail.values() if d["kind"] == "thing"]
    stuff = [d["prq"] for d in detail.values() if d["kind"] == "stuff"]
    return (math.fsum(things) / len(things) if things else float("nan"),
            math.fsum(stuff) / len(stuff) if stuff else float("nan"), detail)


def evaluate(pred: PanopticLabeling, gt: GroundTruth) -> EvalReport:
    mi, ious = miou(pred.semantic, gt)
    ma, accs = macc(pred.semantic, gt)
    pt, ps, detail = prq(pred, gt)
    per_class = {}
    for c in sorted(detail):
        name = gt.class_names[c] if c < len(gt.class_names) else str(c)
        row = dict(detail[c])
        row["iou"] = float(ious[c])
        row["acc"] = float(accs[c])
        per_class[name] = row
    return EvalReport(mi, ma, pt, ps, per_class)
