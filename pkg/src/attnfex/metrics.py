"""Confusion matrices, per-class and support-weighted metrics, report files.

Per-class precision, recall, and F1 use the standard one-vs-rest
definitions (precision = TP/(TP+FP), recall = TP/(TP+FN)); a metric whose
denominator is zero is defined as 0.  Weighted averages weight each class
by its support, which makes weighted recall identical to accuracy.
CSV output scales metrics to percentages with two decimals.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64; rows = true class, cols = predicted

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DimensionError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise DomainError("confusion matrix counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, truth, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise DimensionError(
            f"{preds.shape[0]} predictions but {truth.shape[0]} true labels"
        )
    if len(preds) and (
        preds.min() < 0 or truth.min() < 0
        or preds.max() >= num_classes or truth.max() >= num_classes
    ):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truth, preds), 1)
    return ConfusionMatrix(counts)


def per_class_metrics(cm: ConfusionMatrix):
    """Arrays of per-class (precision, recall, f1, support)."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    support = counts.sum(axis=1)

    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return precision, recall, f1, support.astype(np.int64)


def weighted_metrics(values: np.ndarray, supports: np.ndarray) -> float:
    """Support-weighted average of one per-class metric."""
    supports = np.asarray(supports, dtype=np.float64)
    if supports.sum() <= 0:
        raise DomainError("weighted average needs at least one supported class")
    if (supports < 0).any():
        raise DomainError("supports must be non-negative")
    values = np.asarray(values, dtype=np.float64)
    if values.shape != supports.shape:
        raise DimensionError(f"{values.shape} metrics vs {supports.shape} supports")
    return float(np.sum(values * supports) / supports.sum())


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float


def compute_report(cm: ConfusionMatrix) -> MetricsReport:
    precision, recall, f1, support = per_class_metrics(cm)
    accuracy = float(np.trace(cm.counts) / cm.total) if cm.total else 0.0
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        accuracy=accuracy,
        weighted_precision=weighted_metrics(precision, support),
        weighted_recall=weighted_metrics(recall, support),
        weighted_f1=weighted_metrics(f1, support),
    )


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def summary_row(method: str, report: MetricsReport) -> str:
    return ",".join(
        [method, _pct(report.accuracy), _pct(report.weighted_precision),
         _pct(report.weighted_recall), _pct(report.weighted_f1)]
    )


def write_summary_csv(entries: list[tuple[str, MetricsReport]], path: str | Path) -> None:
    """One percentage row per method: method,accuracy,precision,recall,f1."""
    lines = ["method,accuracy,precision,recall,f1"]
    lines += [summary_row(method, report) for method, report in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_classification_report(
    report: MetricsReport, path: str | Path, class_names: list[str] | None = None
) -> None:
    """Per-class rows, then the weighted row and overall accuracy."""
    names = class_names or [f"class_{i}" for i in range(len(report.support))]
    lines = ["row,precision,recall,f1,support"]
    for i, name in enumerate(names):
        lines.append(
            f"{name},{_pct(report.precision[i])},{_pct(report.recall[i])},"
            f"{_pct(report.f1[i])},{int(report.support[i])}"
        )
    total = int(np.sum(report.support))
    lines.append(
        f"weighted,{_pct(report.weighted_precision)},{_pct(report.weighted_recall)},"
        f"{_pct(report.weighted_f1)},{total}"
    )
    lines.append(f"accuracy,{_pct(report.accuracy)},,,{total}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confusion_csv(
    cm: ConfusionMatrix, path: str | Path, class_names: list[str] | None = None
) -> None:
    names = class_names or [f"class_{i}" for i in range(cm.num_classes)]
    lines = ["true\\pred," + ",".join(names)]
    for i, name in enumerate(names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm.counts[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_accuracy_grid(
    accuracies: dict[str, dict[str, float]], path: str | Path
) -> None:
    """Extractor-by-classifier accuracy grid for heatmap rendering."""
    extractors = sorted(accuracies)
    classifiers = sorted({c for row in accuracies.values() for c in row})
    lines = ["extractor," + ",".join(classifiers)]
    for ext in extractors:
        cells = [
            _pct(accuracies[ext][c]) if c in accuracies[ext] else ""
            for c in classifiers
        ]
        lines.append(ext + "," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
