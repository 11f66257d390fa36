"""Confusion matrices, the ACC/SEN/SPE/precision/F1 metric set, and
cross-fold aggregation. Zero-denominator metrics report 0.0 with an
explicit flag instead of NaN so reports stay machine-comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray  # rows = true class, cols = predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(predictions, labels, num_classes: int | None = None) -> ConfusionMatrix:
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise DataError(
            f"{len(predictions)} predictions but {len(labels)} labels"
        )
    if num_classes is None:
        num_classes = max(max(predictions, default=0), max(labels, default=0)) + 1
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for i, (pred, true) in enumerate(zip(predictions, labels)):
        if not (0 <= pred < num_classes and 0 <= true < num_classes):
            raise DataError(
                f"sample {i}: pred {pred} / label {true} outside [0, {num_classes})"
            )
        counts[true, pred] += 1
    return ConfusionMatrix(num_classes, counts)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall_sensitivity: float
    specificity: float
    f1: float
    undefined_flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall_sensitivity": self.recall_sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "undefined_flags": list(self.undefined_flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["accuracy"], d["precision"], d["recall_sensitivity"],
            d["specificity"], d["f1"], list(d.get("undefined_flags", [])),
        )


def _binary_metrics(tp: float, fp: float, tn: float, fn: float) -> MetricsReport:
    total = tp + fp + tn + fn
    flags: list[str] = []

    def safe(num, den, name):
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    accuracy = safe(tp + tn, total, "accuracy")
    precision = safe(tp, tp + fp, "precision")
    recall = safe(tp, tp + fn, "recall_sensitivity")
    specificity = safe(tn, tn + fp, "specificity")
    if "precision" in flags or "recall_sensitivity" in flags or precision + recall == 0:
        if "f1" not in flags:
            flags.append("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricsReport(accuracy, precision, recall, specificity, f1, flags)


def metrics(cm: ConfusionMatrix, positive_class: int = 1) -> MetricsReport:
    """Binary metrics against the given positive class; with more than two
    classes, macro-averaged one-vs-rest."""
    if cm.total == 0:
        raise DataError("cannot compute metrics on an empty confusion matrix")
    c = cm.counts
    if cm.num_classes == 2:
        p = positive_class
        n = 1 - p
        return _binary_metrics(
            tp=float(c[p, p]), fp=float(c[n, p]),
            tn=float(c[n, n]), fn=float(c[p, n]),
        )
    per_class = []
    for k in range(cm.num_classes):
        tp = float(c[k, k])
        fp = float(c[:, k].sum() - c[k, k])
        fn = float(c[k, :].sum() - c[k, k])
        tn = float(cm.total) - tp - fp - fn
        per_class.append(_binary_metrics(tp, fp, tn, fn))
    flags = sorted({f for r in per_class for f in r.undefined_flags})
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in per_class]))
    return MetricsReport(
        accuracy=float(np.trace(c)) / cm.total,
        precision=mean("precision"),
        recall_sensitivity=mean("recall_sensitivity"),
        specificity=mean("specificity"),
        f1=mean("f1"),
        undefined_flags=flags,
    )


_METRIC_FIELDS = ("accuracy", "precision", "recall_sensitivity", "specificity", "f1")


@dataclass
class CrossValReport:
    folds: list[MetricsReport]
    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "folds": [r.to_dict() for r in self.folds],
            "mean": dict(self.mean),
            "std": dict(self.std),
        }


def aggregate_folds(reports: list[MetricsReport]) -> CrossValReport:
    """Per-metric arithmetic mean and sample standard deviation."""
    if not reports:
        raise DataError("aggregate_folds needs at least one fold report")
    mean = {}
    std = {}
    for name in _METRIC_FIELDS:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return CrossValReport(list(reports), mean, std)


def report_json(report: CrossValReport, indent: int = 2) -> str:
    return json.dumps(report.to_dict(), indent=indent, sort_keys=True)


def report_table(report: CrossValReport) -> str:
    """Plain-text table with ACC/SEN/SPE-style percentage columns."""
    header = f"{'fold':>6}  {'ACC (%)':>8}  {'SEN (%)':>8}  {'SPE (%)':>8}  {'PREC (%)':>9}  {'F1 (%)':>8}"
    lines = [header, "-" * len(header)]

    def row(tag, acc, sen, spe, prec, f1):
        return (f"{tag:>6}  {100 * acc:8.3f}  {100 * sen:8.3f}  "
                f"{100 * spe:8.3f}  {100 * prec:9.3f}  {100 * f1:8.3f}")

    for i, r in enumerate(report.folds):
        lines.append(row(str(i), r.accuracy, r.recall_sensitivity,
                         r.specificity, r.precision, r.f1))
    m = report.mean
    s = report.std
    lines.append(row("mean", m["accuracy"], m["recall_sensitivity"],
                     m["specificity"], m["precision"], m["f1"]))
    lines.append(row("std", s["accuracy"], s["recall_sensitivity"],
                     s["specificity"], s["precision"], s["f1"]))
    return "\n".join(lines)
