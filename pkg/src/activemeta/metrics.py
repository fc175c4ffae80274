"""Dice similarity coefficient and its aggregates.

Conventions:

* a class absent from both prediction and truth scores 1.0;
* ``mean_foreground`` averages the foreground classes (1..K-1) that occur
  in the prediction or the truth; a slice with none scores 1.0;
* spreads are sample standard deviations (n-1 denominator), 0.0 for n=1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ActiveMetaError, ShapeError


class EmptyAggregateError(ActiveMetaError, ValueError):
    pass


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("dice", pred.shape, truth.shape)
    return pred, truth


def dice(pred, truth, class_id: int) -> float:
    """``2|P∩T| / (|P|+|T|)`` for one class; 1.0 when both masks are empty."""
    pred, truth = _check_pair(pred, truth)
    p = pred == class_id
    t = truth == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


@dataclass
class DiceReport:
    per_class: dict[int, float]
    mean_foreground: float
    # class -> (intersection, |pred|, |truth|)
    counts: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    def present_foreground(self) -> list[int]:
        return [c for c, (_, p, t) in self.counts.items() if c > 0 and p + t > 0]


def dice_report(pred, truth, num_classes: int) -> DiceReport:
    pred, truth = _check_pair(pred, truth)
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    p = pred.reshape(-1).astype(np.int64)
    t = truth.reshape(-1).astype(np.int64)
    pc = np.bincount(p, minlength=num_classes)[:num_classes]
    tc = np.bincount(t, minlength=num_classes)[:num_classes]
    ic = np.bincount(p[p == t], minlength=num_classes)[:num_classes]
    per_class, counts = {}, {}
    for c in range(num_classes):
        inter, ps, ts = int(ic[c]), int(pc[c]), int(tc[c])
        counts[c] = (inter, ps, ts)
        per_class[c] = 1.0 if ps + ts == 0 else 2.0 * inter / (ps + ts)
    present = [per_class[c] for c in range(1, num_classes) if counts[c][1] + counts[c][2] > 0]
    mean_fg = float(np.mean(present)) if present else 1.0
    return DiceReport(per_class, mean_fg, counts)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    values = [float(v) for v in values]
    if not values:
        raise EmptyAggregateError("cannot aggregate an empty list")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


@dataclass
class ClassSummary:
    mean: float
    std: float
    n: int


def aggregate(reports: Sequence[DiceReport]) -> dict:
    """Mean and sample std per class, plus ``"mean_foreground"``."""
    if not reports:
        raise EmptyAggregateError("aggregate needs at least one report")
    out: dict = {}
    for c in reports[0].per_class:
        m, s = mean_std([r.per_class[c] for r in reports])
        out[c] = ClassSummary(m, s, len(reports))
    m, s = mean_std([r.mean_foreground for r in reports])
    out["mean_foreground"] = ClassSummary(m, s, len(reports))
    return out


def batch_reports(preds: np.ndarray, truths: np.ndarray, num_classes: int) -> list[DiceReport]:
    return [dice_report(p, t, num_classes) for p, t in zip(preds, truths)]


def fmt(x: float) -> str:
    return f"{x:.6f}"


def report_rows(patient: str, slice_index: int, report: DiceReport) -> Iterable[list[str]]:
    for c, d in report.per_class.items():
        yield [patient, str(slice_index), str(c), fmt(d)]


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """UTF-8, LF-terminated CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


DICE_CSV_HEADER = ("patient", "slice", "class", "dsc")
SUMMARY_CSV_HEADER = ("class", "mean", "std", "n")
