"""Pixelwise contingency counts and the verification scores built on them."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

NEGATIVE_WEIGHT = 1500.0
METRIC_NAMES = ("tpr", "tnr", "accuracy", "far", "precision")


@dataclass
class ConfusionMatrix:
    tp: float = 0
    fp: float = 0
    fn: float = 0
    tn: float = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> float:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricReport:
    tpr: float
    tnr: float
    accuracy: float
    far: float
    precision: float
    tp: float
    fp: float
    fn: float
    tn: float
    threshold: float = 0.5
    undefined: tuple[str, ...] = field(default_factory=tuple)

    @property
    def cm(self) -> ConfusionMatrix:
        return ConfusionMatrix(self.tp, self.fp, self.fn, self.tn)


def confuse(probs: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> ConfusionMatrix:
    """Threshold probabilities (positive when >= threshold) and count outcomes."""
    probs = np.asarray(probs)
    truth = np.asarray(truth)
    if probs.shape != truth.shape:
        raise ValueError(f"shape mismatch: predictions {probs.shape} vs truth {truth.shape}")
    pred = probs >= threshold
    obs = truth > 0.5
    tp = int(np.count_nonzero(pred & obs))
    fp = int(np.count_nonzero(pred & ~obs))
    fn = int(np.count_nonzero(~pred & obs))
    return ConfusionMatrix(tp, fp, fn, int(obs.size) - tp - fp - fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.nan


def metrics(cm: ConfusionMatrix, threshold: float = 0.5) -> MetricReport:
    """TPR (POD), TNR, accuracy, FAR = FP/(TP+FP) and precision = TP/(TP+FP).

    Ratios with a zero denominator are NaN and listed in ``undefined``.
    """
    if cm.total <= 0:
        raise ValueError("confusion matrix is empty")
    values = {
        "tpr": _ratio(cm.tp, cm.tp + cm.fn),
        "tnr": _ratio(cm.tn, cm.tn + cm.fp),
        "accuracy": _ratio(cm.tp + cm.tn, cm.total),
        "far": _ratio(cm.fp, cm.tp + cm.fp),
        "precision": _ratio(cm.tp, cm.tp + cm.fp),
    }
    undefined = tuple(k for k, v in values.items() if math.isnan(v))
    return MetricReport(**values, tp=cm.tp, fp=cm.fp, fn=cm.fn, tn=cm.tn, threshold=threshold, undefined=undefined)


def reweight_negatives(cm: ConfusionMatrix, factor: float = NEGATIVE_WEIGHT) -> ConfusionMatrix:
    """Scale the negative-class counts (TN, FP) as if negatives were ``factor`` times more common."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    return ConfusionMatrix(cm.tp, cm.fp * factor, cm.fn, cm.tn * factor)


def aggregate(reports: Sequence[MetricReport | ConfusionMatrix]) -> ConfusionMatrix:
    """Micro-average: sum raw counts across folds."""
    if not reports:
        raise ValueError("need at least one fold")
    total = ConfusionMatrix()
    for r in reports:
        total = total + (r.cm if isinstance(r, MetricReport) else r)
    return total


REPORT_FIELDS = ["fold", "variant", "threshold", "tp", "fp", "fn", "tn", *METRIC_NAMES,
                 "accuracy_reweighted", "far_reweighted"]


def _row(fold, variant: str, rep: MetricReport, factor: float) -> dict:
    rw = metrics(reweight_negatives(rep.cm, factor), rep.threshold)
    row = {k: v for k, v in asdict(rep).items() if k in REPORT_FIELDS}
    row.update(fold=fold, variant=variant, accuracy_reweighted=rw.accuracy, far_reweighted=rw.far)
    return row


def emit_report(per_fold: Mapping[str, Sequence[MetricReport]], csv_path: str | Path | None = None,
                plot_path: str | Path | None = None,
                factor: float = NEGATIVE_WEIGHT) -> dict[str, MetricReport]:
    """Aggregate fold reports per model variant and write CSV / plot-data TSV.

    ``per_fold`` maps a variant name to its fold reports.  The CSV has one
    row per fold plus an ``all`` row per variant; the TSV holds
    (metric, variant, value) triples of the aggregated scores, with accuracy
    and FAR also given after negative re-weighting.
    """
    totals: dict[str, MetricReport] = {}
    rows = []
    for variant, reports in per_fold.items():
        thr = reports[0].threshold
        for k, rep in enumerate(reports, start=1):
            rows.append(_row(k, variant, rep, factor))
        totals[variant] = metrics(aggregate(reports), thr)
        rows.append(_row("all", variant, totals[variant], factor))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    if plot_path is not None:
        with open(plot_path, "w") as fh:
            fh.write("metric\tvariant\tvalue\n")
            for variant, rep in totals.items():
                rw = metrics(reweight_negatives(rep.cm, factor), rep.threshold)
                for name in ("far", "tnr", "tpr", "accuracy"):
                    fh.write(f"{name}\t{variant}\t{getattr(rep, name):.6f}\n")
                fh.write(f"accuracy_reweighted\t{variant}\t{rw.accuracy:.6f}\n")
                fh.write(f"far_reweighted\t{variant}\t{rw.far:.6f}\n")
    return totals
