"""Per-class overlap metrics and box-plot style aggregate statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

METRICS = ("dsc", "precision", "recall")


@dataclass
class ConfusionCounts:
    """One-vs-rest voxel counts; arrays indexed by class id."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.tp.size


@dataclass
class ClassMetrics:
    dsc: Optional[float]
    recall: Optional[float]
    precision: Optional[float]
    present_in_truth: bool

    def get(self, metric: str) -> Optional[float]:
        return getattr(self, metric)


@dataclass
class SubjectMetrics:
    subject: str
    classes: list[ClassMetrics]

    def mean_foreground_dsc(self) -> Optional[float]:
        vals = [c.dsc for c in self.classes[1:] if c.dsc is not None]
        return float(np.mean(vals)) if vals else None


def confusion_counts(pred, truth, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(getattr(pred, "values", pred)).reshape(-1).astype(np.int64)
    truth = np.asarray(getattr(truth, "values", truth)).reshape(-1).astype(np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction has {pred.size} voxels, truth has {truth.size}")
    for name, a in (("prediction", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} label outside [0, {num_classes})")
    cm = np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(cm).copy()
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def per_class_metrics(counts: ConfusionCounts) -> list[ClassMetrics]:
    """DSC = 2TP/(2TP+FP+FN), recall = TP/(TP+FN), precision = TP/(TP+FP).

    A metric with a zero denominator is ``None`` (undefined), never 0 or 1.
    """
    out = []
    for tp, fp, fn in zip(counts.tp.tolist(), counts.fp.tolist(), counts.fn.tolist()):
        out.append(ClassMetrics(
            dsc=_ratio(2 * tp, 2 * tp + fp + fn),
            recall=_ratio(tp, tp + fn),
            precision=_ratio(tp, tp + fp),
            present_in_truth=tp + fn > 0,
        ))
    return out


def subject_metrics(subject: str, pred, truth, num_classes: int) -> SubjectMetrics:
    return SubjectMetrics(subject, per_class_metrics(confusion_counts(pred, truth, num_classes)))


@dataclass
class SummaryRow:
    cls: int
    metric: str
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    ci_lo: float
    ci_hi: float
    outliers: list[float] = field(default_factory=list)
    n_undefined: int = 0


def summarize(values: Sequence[float], n_undefined: int = 0, cls: int = -1, metric: str = "") -> SummaryRow:
    """Mean, linear-interpolation quartiles, normal 95% CI and 1.5 IQR outliers."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty set of values")
    mean = float(v.mean())
    q1, median, q3 = (float(q) for q in np.percentile(v, [25, 50, 75]))
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = [float(x) for x in v if x < lo or x > hi]
    return SummaryRow(cls, metric, int(v.size), mean, median, q1, q3, mean - half, mean + half,
                      outliers, n_undefined)


def aggregate_stats(subjects: Iterable[SubjectMetrics]) -> list[SummaryRow]:
    """One row per (class, metric) over all given subjects (or arms).

    Undefined values are left out and counted; a (class, metric) pair with
    no defined value at all is skipped.
    """
    subjects = list(subjects)
    if not subjects:
        raise ValueError("aggregate_stats needs at least one subject")
    C = len(subjects[0].classes)
    rows = []
    for c in range(C):
        for m in METRICS:
            vals = [s.classes[c].get(m) for s in subjects]
            defined = [x for x in vals if x is not None]
            if defined:
                rows.append(summarize(defined, len(vals) - len(defined), c, m))
    return rows


def mean_foreground_dsc(subjects: Sequence[SubjectMetrics], order: str = "subject") -> Optional[float]:
    """Overall foreground DSC.

    ``order="subject"`` averages classes within each subject first;
    ``order="class"`` averages subjects within each class first.
    """
    if order == "subject":
        per = [s.mean_foreground_dsc() for s in subjects]
        per = [x for x in per if x is not None]
        return float(np.mean(per)) if per else None
    C = len(subjects[0].classes) if subjects else 0
    per_class = []
    for c in range(1, C):
        vals = [s.classes[c].dsc for s in subjects if s.classes[c].dsc is not None]
        if vals:
            per_class.append(np.mean(vals))
    return float(np.mean(per_class)) if per_class else None


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{x:.6f}"


SUMMARY_HEADER = ["class", "metric", "n", "mean", "median", "q1", "q3", "ci_lo", "ci_hi",
                  "n_outliers", "n_undefined"]
SUBJECT_HEADER = ["subject", "class", "metric", "value", "present_in_truth"]


def emit_report(stats: Sequence[SummaryRow], subjects: Sequence[SubjectMetrics], out_dir) -> tuple[Path, Path]:
    """Write ``metrics_summary.csv`` and ``metrics_subjects.csv`` into ``out_dir``.

    Rows are ordered by class index, then metric name, then subject id. The
    summary ends with two ``fg_mean_*`` rows giving the overall foreground
    DSC under both averaging orders.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = out_dir / "metrics_summary.csv"
    per_subject = out_dir / "metrics_subjects.csv"

    with open(summary, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in sorted(stats, key=lambda r: (r.cls, r.metric)):
            w.writerow([r.cls, r.metric, r.n, _fmt(r.mean), _fmt(r.median), _fmt(r.q1), _fmt(r.q3),
                        _fmt(r.ci_lo), _fmt(r.ci_hi), len(r.outliers), r.n_undefined])
        for order in ("subject", "class"):
            v = mean_foreground_dsc(subjects, order) if subjects else None
            n = len(subjects) if order == "subject" else (len(subjects[0].classes) - 1 if subjects else 0)
            w.writerow([f"fg_mean_{order}_first", "dsc", n, _fmt(v), "", "", "", "", "", "", ""])

    with open(per_subject, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUBJECT_HEADER)
        C = len(subjects[0].classes) if subjects else 0
        ordered = sorted(subjects, key=lambda s: s.subject)
        for c in range(C):
            for m in METRICS:
                for s in ordered:
                    cm = s.classes[c]
                    w.writerow([s.subject, c, m, _fmt(cm.get(m)), int(cm.present_in_truth)])
    return summary, per_subject
