"""Precision/recall and COCO-style mAP/mAR for a single object category.

Predictions are ranked by score (stable, ties keep input order), matched
greedily per image at each IoU threshold, and pooled across images. AP
uses the 101-point interpolated precision envelope; AR is the recall
reached with at most ``max_dets`` predictions per image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import KindError
from .tracking import iou as box_iou

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")


def precision(c: ConfusionCounts):
    """TP / (TP + FP), or 0 when nothing was predicted."""
    d = c.tp + c.fp
    return c.tp / d if d else 0.0


def recall(c: ConfusionCounts):
    """TP / (TP + FN), or 0 when there is no ground truth."""
    d = c.tp + c.fn
    return c.tp / d if d else 0.0


@dataclass(frozen=True)
class ScoredInstance:
    """A ground-truth (``score=None``) or predicted region on one image."""

    image_id: object
    region: object
    score: float | None = None


def _kind(region):
    if hasattr(region, "bits"):
        return "mask"
    a = np.asarray(region)
    if a.ndim == 2:
        return "mask"
    if a.ndim == 1 and a.shape[0] == 4:
        return "box"
    raise KindError(f"cannot interpret region of shape {a.shape}")


def region_iou(a, b):
    """IoU of two boxes (by area) or two masks (by pixel count).

    Raises
    ------
    KindError
        If one region is a box and the other a mask, or masks differ in shape.
    """
    ka, kb = _kind(a), _kind(b)
    if ka != kb:
        raise KindError(f"cannot compare a {ka} with a {kb}")
    if ka == "box":
        return box_iou(tuple(map(float, a)), tuple(map(float, b)))
    ma = np.asarray(getattr(a, "bits", a), dtype=bool)
    mb = np.asarray(getattr(b, "bits", b), dtype=bool)
    if ma.shape != mb.shape:
        raise KindError(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def rank(preds):
    """Prediction indices by descending score; ties keep input order."""
    scores = np.array([float(p.score) for p in preds], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def _keep_top(preds, max_dets):
    """Indices of the ``max_dets`` best-scored predictions of every image."""
    per_image = {}
    for i in rank(preds):
        per_image.setdefault(preds[i].image_id, []).append(int(i))
    return sorted(i for ids in per_image.values() for i in ids[:max_dets])


class Matching(NamedTuple):
    tp: np.ndarray          # per prediction, aligned with the input order
    gt_matched: np.ndarray  # per ground-truth instance


def _iou_table(gts, preds):
    table = {}
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if g.image_id == p.image_id:
                table[i, j] = region_iou(p.region, g.region)
    return table


def match_at_iou(gts, preds, thr, ious=None):
    """Greedy COCO matching at one IoU threshold.

    Predictions are visited by descending score; each takes the unmatched
    ground truth of its own image with the highest IoU, provided that IoU
    is at least ``thr``. Equal IoUs go to the lower ground-truth index.
    """
    ious = _iou_table(gts, preds) if ious is None else ious
    tp = np.zeros(len(preds), dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    for i in rank(preds):
        best, best_j = thr, -1
        for j in range(len(gts)):
            if matched[j] or (i, j) not in ious:
                continue
            v = ious[i, j]
            if v >= best and (best_j < 0 or v > best):
                best, best_j = v, j
        if best_j >= 0:
            tp[i] = True
            matched[best_j] = True
    return Matching(tp, matched)


def _pr_curve(tp_sorted, n_gt):
    tps = np.cumsum(tp_sorted)
    fps = np.cumsum(~tp_sorted)
    rec = tps / n_gt
    prec = tps / np.maximum(tps + fps, np.finfo(np.float64).tiny)
    return rec, prec


def interpolated_ap(rec, prec):
    """Mean of the precision envelope sampled at 101 recall points."""
    if len(rec) == 0:
        return 0.0
    env = np.maximum.accumulate(np.asarray(prec, dtype=np.float64)[::-1])[::-1]
    idx = np.searchsorted(rec, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(sampled.mean())


def _prepare(gts, preds, max_dets):
    if any(p.score is None for p in preds):
        raise ValueError("every prediction needs a score")
    keep = _keep_top(preds, max_dets)
    return [preds[i] for i in keep]


def average_precision(gts, preds, thr, max_dets=MAX_DETS):
    """Interpolated AP at one IoU threshold (0 when there is no ground truth)."""
    gts, preds = list(gts), _prepare(gts, list(preds), max_dets)
    if not gts or not preds:
        return 0.0
    m = match_at_iou(gts, preds, thr)
    rec, prec = _pr_curve(m.tp[rank(preds)], len(gts))
    return interpolated_ap(rec, prec)


class ThresholdScore(NamedTuple):
    iou_threshold: float
    ap: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class EvalSummary:
    mAP: float
    ap50: float
    mAR: float
    per_threshold: tuple = ()

    def as_tuple(self):
        return (self.mAP, self.ap50, self.mAR)


def evaluate(gts, preds, thresholds=IOU_THRESHOLDS, max_dets=MAX_DETS):
    """Per-threshold AP, recall and confusion counts."""
    gts, preds = list(gts), _prepare(gts, list(preds), max_dets)
    ious = _iou_table(gts, preds)
    order = rank(preds) if preds else np.zeros(0, dtype=int)
    out = []
    for thr in thresholds:
        m = match_at_iou(gts, preds, float(thr), ious)
        n_tp = int(m.tp.sum())
        counts = ConfusionCounts(n_tp, len(preds) - n_tp, len(gts) - n_tp)
        if gts and preds:
            ap = interpolated_ap(*_pr_curve(m.tp[order], len(gts)))
        else:
            ap = 0.0
        out.append(ThresholdScore(float(thr), ap, recall(counts), counts.tp, counts.fp, counts.fn))
    return out


def summarize(gts, preds, max_dets=MAX_DETS):
    """mAP over IoU 0.50:0.05:0.95, AP at 0.50 and mAR over the same range."""
    rows = evaluate(gts, preds, IOU_THRESHOLDS, max_dets)
    return EvalSummary(
        mAP=float(np.mean([r.ap for r in rows])),
        ap50=rows[0].ap,
        mAR=float(np.mean([r.recall for r in rows])),
        per_threshold=tuple(rows),
    )
