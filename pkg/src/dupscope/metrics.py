"""Forensic scoring: MCC, precision/recall/F1, AUC, balanced accuracy at
pixel and image level, plus JSON report serialization.

Pixel-level scores pool the confusion counts of every pixel of every sample
before computing the score; image-level scores binarize each sample first.
Counts form a commutative monoid, so parallel accumulation is safe.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, ShapeMismatch, SingleClass


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn


def mcc(c):
    """Matthews correlation coefficient; 0 when any denominator factor is 0."""
    denom = (
        (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    )
    if denom == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom)


def prf1(c):
    """(precision, recall, f1); zero where the denominator vanishes."""
    precision = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else 0.0
    recall = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return precision, recall, f1


def balanced_accuracy(c):
    """(TPR + TNR) / 2; undefined halves contribute 0."""
    tpr = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else 0.0
    tnr = c.tn / (c.tn + c.fp) if (c.tn + c.fp) else 0.0
    return 0.5 * (tpr + tnr)


def pixel_eval(pred, gt, threshold=0.5):
    """Confusion counts over all pixels of one probability map."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs mask {gt.shape}")
    pos = pred >= threshold
    gt_pos = gt > 0.5
    return ConfusionCounts(
        tp=int(np.sum(pos & gt_pos)),
        tn=int(np.sum(~pos & ~gt_pos)),
        fp=int(np.sum(pos & ~gt_pos)),
        fn=int(np.sum(~pos & gt_pos)),
    )


def confusion_from_maps(preds, gts, threshold=0.5):
    """Pooled pixel counts over a stack of maps (the aggregate convention)."""
    return pixel_eval(np.asarray(preds), np.asarray(gts), threshold)


def image_label(pred, threshold=0.5, min_area_frac=0.001):
    """An image is called manipulated when at least ``min_area_frac`` of its
    pixels clear the threshold."""
    pred = np.asarray(pred)
    frac = float(np.mean(pred >= threshold))
    return frac >= min_area_frac and frac > 0.0


def image_eval(preds, gts, threshold=0.5, min_area_frac=0.001):
    """Image-level confusion counts; ground truth label = any positive pixel."""
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} masks")
    c = ConfusionCounts()
    for pred, gt in zip(preds, gts):
        called = image_label(pred, threshold, min_area_frac)
        truth = bool(np.asarray(gt).max() > 0.5)
        if called and truth:
            c.tp += 1
        elif called and not truth:
            c.fp += 1
        elif not called and truth:
            c.fn += 1
        else:
            c.tn += 1
    return c


def auc(scores, labels):
    """Rank-based (Mann-Whitney) AUC with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = ranks[labels].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class MetricsReport:
    """Scores at one level (pixel or image) plus the settings behind them."""

    level: str
    threshold: float
    sample_count: int
    mcc: float
    precision: float
    recall: float
    f1: float
    bacc: float
    auc: float | None = None
    counts: ConfusionCounts | None = None
    notes: dict | None = None

    @classmethod
    def from_counts(cls, level, counts, threshold, sample_count, auc_value=None, notes=None):
        p, r, f1_value = prf1(counts)
        return cls(
            level=level,
            threshold=threshold,
            sample_count=sample_count,
            mcc=mcc(counts),
            precision=p,
            recall=r,
            f1=f1_value,
            bacc=balanced_accuracy(counts),
            auc=auc_value,
            counts=counts,
        )

    def to_dict(self):
        d = {
            "level": self.level,
            "threshold": self.threshold,
            "sample_count": self.sample_count,
            "mcc": self.mcc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "bacc": self.bacc,
            "auc": self.auc,
        }
        if self.counts is not None:
            d["counts"] = {
                "tp": self.counts.tp,
                "tn": self.counts.tn,
                "fp": self.counts.fp,
                "fn": self.counts.fn,
            }
        if self.notes:
            d["notes"] = self.notes
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_maps(preds, gts, threshold=0.5, min_area_frac=0.001):
    """Standard two-level report pair for a stack of probability maps."""
    pixel_counts = confusion_from_maps(preds, gts, threshold)
    img_counts = image_eval(preds, gts, threshold, min_area_frac)
    scores = [float(np.mean(np.asarray(p) >= threshold)) for p in preds]
    labels = [bool(np.asarray(g).max() > 0.5) for g in gts]
    try:
        auc_value = auc(scores, labels)
    except SingleClass:
        auc_value = None
    pixel = MetricsReport.from_counts("pixel", pixel_counts, threshold, len(preds))
    image = MetricsReport.from_counts(
        "image", img_counts, threshold, len(preds), auc_value=auc_value
    )
    return pixel, image
