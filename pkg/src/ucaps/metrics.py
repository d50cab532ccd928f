"""Overlap metrics for label volumes and their JSON / CSV reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

__all__ = ["dice", "precision", "recall", "SegMetrics", "evaluate"]


def _counts(pred, truth, k):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    p = pred == k
    t = truth == k
    return int(np.count_nonzero(p & t)), int(np.count_nonzero(p)), int(np.count_nonzero(t))


def _ratio(num: float, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def dice(pred, truth, k: int) -> float:
    """``2|P & T| / (|P| + |T|)``; 1.0 when both masks are empty."""
    inter, np_, nt = _counts(pred, truth, k)
    return _ratio(2.0 * inter, np_ + nt, np_ == 0 and nt == 0)


def precision(pred, truth, k: int) -> float:
    """``|P & T| / |P|``; 1.0 if both masks are empty, 0.0 if only ``P`` is."""
    inter, np_, nt = _counts(pred, truth, k)
    return _ratio(float(inter), np_, np_ == 0 and nt == 0)


def recall(pred, truth, k: int) -> float:
    """``|P & T| / |T|``; 1.0 if both masks are empty, 0.0 if only ``T`` is."""
    inter, np_, nt = _counts(pred, truth, k)
    return _ratio(float(inter), nt, np_ == 0 and nt == 0)


@dataclass
class SegMetrics:
    dice: Dict[int, float] = field(default_factory=dict)
    precision: Dict[int, float] = field(default_factory=dict)
    recall: Dict[int, float] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        """Mean Dice over foreground classes (class 0 is background)."""
        fg = [v for k, v in self.dice.items() if k != 0]
        return float(np.mean(fg)) if fg else float("nan")

    def rows(self) -> Iterable[dict]:
        for k in sorted(self.dice):
            yield {"class": k, "dice": self.dice[k], "precision": self.precision[k],
                   "recall": self.recall[k]}

    def to_dict(self) -> dict:
        return {"classes": list(self.rows()), "mean_dice": self.mean_dice}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["class", "dice", "precision", "recall"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows())
        return buf.getvalue()


def evaluate(pred, truth, num_classes: Optional[int] = None) -> SegMetrics:
    """Per-class Dice, precision and recall for every class id up to ``num_classes``."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    out = SegMetrics()
    for k in range(num_classes):
        inter, np_, nt = _counts(pred, truth, k)
        empty = np_ == 0 and nt == 0
        out.dice[k] = _ratio(2.0 * inter, np_ + nt, empty)
        out.precision[k] = _ratio(float(inter), np_, empty)
        out.recall[k] = _ratio(float(inter), nt, empty)
    return out
