"""Evaluation metrics: distribution metrics on heatmaps, overlap metrics on
multi-label masks, and pixel-level average precision.

Overlap counts are accumulated over the whole evaluation set before any
division, so results do not depend on frame order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AllZeroMap, DomainError, ShapeMismatch

KLD_DELTA = 1e-12


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if np.any(pred < 0) or np.any(gt < 0):
        raise DomainError("maps must be nonnegative")
    if not pred.any() or not gt.any():
        raise AllZeroMap("map is all zero")
    return pred, gt


def kld(pred, gt, delta: float = KLD_DELTA) -> float:
    """KL(gt || pred) after smoothing both maps by ``delta`` and normalizing."""
    pred, gt = _pair(pred, gt)
    p = pred + delta
    p = p / p.sum()
    g = gt + delta
    g = g / g.sum()
    return max(0.0, math.fsum((g * np.log(g / p)).ravel()))


def sim(pred, gt) -> float:
    """Histogram intersection of the two maps normalized to unit mass."""
    pred, gt = _pair(pred, gt)
    value = math.fsum(np.minimum(pred / pred.sum(), gt / gt.sum()).ravel())
    return min(1.0, max(0.0, value))


def auc_judd(pred, gt_points, variant: str = "all") -> float:
    """ROC area with ground-truth pixels as positives, all others negatives.

    ``variant="all"`` sweeps every distinct prediction value, which equals
    the pairwise rank statistic with ties counted as one half.
    ``variant="judd"`` sweeps only values found at positive pixels, the
    classic saliency-benchmark curve.
    """
    s = np.asarray(pred, dtype=float).ravel()
    gt = np.asarray(gt_points).ravel().astype(bool)
    if s.shape != gt.shape:
        raise ShapeMismatch("prediction and ground truth differ in size")
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC needs at least one positive and one negative pixel")
    if variant == "all":
        thresholds = np.unique(s)[::-1]
    elif variant == "judd":
        thresholds = np.unique(s[gt])[::-1]
    else:
        raise DomainError(f"unknown AUC variant {variant!r}")
    # integer counts of pixels scoring >= each threshold
    pos_sorted = np.sort(s[gt])
    neg_sorted = np.sort(s[~gt])
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    tp = np.concatenate([[0], tp, [n_pos]]).astype(np.int64)
    fp = np.concatenate([[0], fp, [n_neg]]).astype(np.int64)
    # twice the trapezoid area in count units: sum dFP * (TP_prev + TP_cur)
    twice_area = int(np.sum(np.diff(fp) * (tp[:-1] + tp[1:])))
    return twice_area / (2 * n_pos * n_neg)


@dataclass
class OverlapCounts:
    """Per-class TP/FP/FN pixel counts; merge by addition."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, K: int) -> "OverlapCounts":
        z = np.zeros(K, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    @classmethod
    def from_masks(cls, pred, gt) -> "OverlapCounts":
        p = np.asarray(getattr(pred, "planes", pred)).astype(bool)
        g = np.asarray(getattr(gt, "planes", gt)).astype(bool)
        if p.shape != g.shape:
            raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
        K = p.shape[0]
        p, g = p.reshape(K, -1), g.reshape(K, -1)
        return cls((p & g).sum(1).astype(np.int64), (p & ~g).sum(1).astype(np.int64),
                   (~p & g).sum(1).astype(np.int64))

    def __add__(self, other: "OverlapCounts") -> "OverlapCounts":
        return OverlapCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def iou(self) -> np.ndarray:
        union = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.tp / np.maximum(union, 1), np.nan)

    def dice(self) -> np.ndarray:
        denom = 2 * self.tp + self.fp + self.fn
        return np.where(denom > 0, 2 * self.tp / np.maximum(denom, 1), np.nan)


def _nanmean(values: np.ndarray) -> float:
    v = values[~np.isnan(values)]
    return float(math.fsum(v) / len(v)) if len(v) else float("nan")


def _accumulate(pairs) -> OverlapCounts:
    total = None
    for pred, gt in pairs:
        c = OverlapCounts.from_masks(pred, gt)
        total = c if total is None else total + c
    if total is None:
        raise DomainError("no mask pairs to evaluate")
    return total


def _pairs(pred, gt):
    if isinstance(pred, (list, tuple)):
        if len(pred) != len(gt):
            raise ShapeMismatch("prediction and ground-truth lists differ in length")
        return list(zip(pred, gt))
    return [(pred, gt)]


def miou(pred, gt) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the union is empty) and their mean.

    ``pred``/``gt`` are single masks or equal-length lists of masks.
    """
    iou = _accumulate(_pairs(pred, gt)).iou()
    return iou, _nanmean(iou)


def f1(pred, gt) -> float:
    return _nanmean(_accumulate(_pairs(pred, gt)).dice())


def _pr_curve(scores: np.ndarray, gt: np.ndarray):
    """Precision, recall and IoU at every distinct score, descending."""
    order = np.argsort(-scores, kind="stable")
    s, g = scores[order], gt[order]
    tp = np.cumsum(g, dtype=np.int64)
    fp = np.cumsum(~g, dtype=np.int64)
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp, fp = tp[last], fp[last]
    P = int(g.sum())
    precision = tp / (tp + fp)
    recall = tp / P
    iou = tp / (P + fp)
    return precision, recall, iou


def _interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    # envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    dr = np.diff(np.concatenate([[0.0], recall]))
    return float(math.fsum(dr * env))


def average_precision(scores, gt) -> tuple[np.ndarray, float, float, np.ndarray]:
    """Pixel-level AP per class.

    Returns ``(ap, mAP, AP50, ap50_per_class)``. Per class, AP is the area
    under the interpolated precision/recall curve over all distinct score
    thresholds. AP50 is the precision at the highest threshold whose
    binarized mask reaches IoU >= 0.5 (0 if none does). Means run over
    classes with at least one positive pixel; other classes are NaN.
    """
    S = np.asarray(getattr(scores, "values", scores), dtype=float)
    G = np.asarray(getattr(gt, "planes", gt)).astype(bool)
    if S.shape != G.shape:
        raise ShapeMismatch(f"scores {S.shape} vs ground truth {G.shape}")
    K = S.shape[0]
    S, G = S.reshape(K, -1), G.reshape(K, -1)
    ap = np.full(K, np.nan)
    ap50 = np.full(K, np.nan)
    for k in range(K):
        if not G[k].any():
            continue
        precision, recall, iou = _pr_curve(S[k], G[k])
        ap[k] = _interpolated_ap(precision, recall)
        hit = np.flatnonzero(iou >= 0.5)
        ap50[k] = float(precision[hit[0]]) if len(hit) else 0.0
    return ap, _nanmean(ap), _nanmean(ap50), ap50


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    iou: np.ndarray
    miou: float
    f1: float
    kld: float
    sim: float
    auc_j: float
    ap: np.ndarray
    mAP: float
    ap50: float
    frames: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def num(x):
            x = float(x)
            return None if math.isnan(x) else x
        d = {"frames": self.frames, "classes": list(self.classes),
             "per_class_iou": {c: num(v) for c, v in zip(self.classes, self.iou)},
             "mIoU": num(self.miou), "F1": num(self.f1), "KLD": num(self.kld),
             "SIM": num(self.sim), "AUC-J": num(self.auc_j),
             "per_class_ap": {c: num(v) for c, v in zip(self.classes, self.ap)},
             "mAP": num(self.mAP), "AP50": num(self.ap50)}
        d.update(self.extra)
        return d

    def table(self) -> str:
        """Aligned text table: per-class IoU row then the summary metrics (in %)."""
        def pct(x):
            return "  -  " if math.isnan(x) else f"{100 * x:5.1f}"
        width = max([5] + [len(c) for c in self.classes])
        head = " | ".join(c.rjust(width) for c in self.classes) + " | " + "mIoU".rjust(width)
        row = " | ".join(pct(v).rjust(width) for v in self.iou) + " | " + pct(self.miou).rjust(width)
        names = ("KLD", "SIM", "AUC-J", "mIoU", "F1-Score", "mAP", "AP50")
        vals = (f"{self.kld:.3f}", f"{self.sim:.3f}", f"{self.auc_j:.3f}", pct(self.miou),
                pct(self.f1), pct(self.mAP), pct(self.ap50))
        vals = tuple("  -  " if v.strip() == "nan" else v for v in vals)
        w2 = max(len(n) for n in names + vals)
        summary = (" | ".join(n.rjust(w2) for n in names) + "\n"
                   + " | ".join(v.rjust(w2) for v in vals))
        return f"{head}\n{row}\n\n{summary}\n"


def distribution_scores(pred_planes: np.ndarray, gt_planes: np.ndarray):
    """(KLD, SIM, AUC-J) lists over classes with ground-truth support.

    An all-zero prediction plane is scored as a uniform map.
    """
    klds, sims, aucs = [], [], []
    for pk, gk in zip(pred_planes, gt_planes):
        if not gk.any():
            continue
        pk = np.asarray(pk, dtype=float)
        if not pk.any():
            pk = np.ones_like(pk)
        klds.append(kld(pk, gk))
        sims.append(sim(pk, gk))
        if not gk.all():
            aucs.append(auc_judd(pk, gk))
    return klds, sims, aucs


def evaluate(preds: Sequence, gts: Sequence, classes: Sequence[str],
             scores: Sequence | None = None) -> EvalReport:
    """Full report over a set of frames.

    ``preds``/``gts`` are binary ``K x H x W`` arrays (or masks). Heatmap
    metrics and AP use ``scores`` when given, otherwise the binary
    predictions.
    """
    if len(preds) != len(gts):
        raise ShapeMismatch("prediction and ground-truth lists differ in length")
    if not preds:
        raise DomainError("nothing to evaluate")
    classes = tuple(classes)
    counts = OverlapCounts.zeros(len(classes))
    klds, sims, aucs = [], [], []
    heat = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        p = np.asarray(getattr(p, "planes", getattr(p, "values", p)))
        g = np.asarray(getattr(g, "planes", g))
        if p.shape[0] != len(classes) or g.shape != p.shape:
            raise ShapeMismatch(f"frame {i}: shape {p.shape} vs {g.shape}")
        counts = counts + OverlapCounts.from_masks(p, g)
        s = p if scores is None else np.asarray(getattr(scores[i], "values", scores[i]))
        heat.append(s.reshape(len(classes), -1))
        a, b, c = distribution_scores(s, g)
        klds += a
        sims += b
        aucs += c
    all_scores = np.concatenate(heat, axis=1)
    all_gt = np.concatenate([np.asarray(getattr(g, "planes", g)).reshape(len(classes), -1)
                             for g in gts], axis=1)
    ap, mAP, ap50, _ = average_precision(all_scores, all_gt)
    iou = counts.iou()

    def mean(v):
        return math.fsum(v) / len(v) if v else float("nan")

    return EvalReport(classes, iou, _nanmean(iou), _nanmean(counts.dice()), mean(klds),
                      mean(sims), mean(aucs), ap, mAP, ap50, frames=len(preds))
