"""Confusion counting over the changed class and the five summary scores."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, ShapeError

SCORE_KEYS = ("f1", "precision", "recall", "iou", "oa")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return merge(self, other)


@dataclass(frozen=True)
class Scores:
    f1: float
    precision: float
    recall: float
    iou: float
    oa: float

    def to_dict(self):
        return asdict(self)


def accumulate(c: ConfusionCounts, pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size) - tp - fp - fn
    return ConfusionCounts(c.tp + tp, c.fp + fp, c.fn + fn, c.tn + tn)


def merge(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts:
    # python ints, no overflow
    return ConfusionCounts(a.tp + b.tp, a.fp + b.fp, a.fn + b.fn, a.tn + b.tn)


def finalize(c: ConfusionCounts) -> Scores:
    if c.total <= 0:
        raise DataError("cannot score empty confusion counts")
    # zero denominators: perfect when there was nothing to find and nothing predicted
    fallback = 1.0 if c.tp + c.fp + c.fn == 0 else 0.0

    def ratio(num, den):
        return num / den if den else fallback

    p = ratio(c.tp, c.tp + c.fp)
    r = ratio(c.tp, c.tp + c.fn)
    f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    iou = ratio(c.tp, c.tp + c.fp + c.fn)
    oa = (c.tp + c.tn) / c.total
    return Scores(f1=f1, precision=p, recall=r, iou=iou, oa=oa)


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def iou_from_f1(f1: float) -> float:
    return f1 / (2 - f1)


def format_report(scores: Scores) -> str:
    """Flat JSON object, six decimals per value."""
    body = ", ".join(f'"{k}": {getattr(scores, k):.6f}' for k in SCORE_KEYS)
    return "{" + body + "}\n"


def parse_report(text: str) -> Scores:
    data = json.loads(text)
    return Scores(**{k: float(data[k]) for k in SCORE_KEYS})
