"""Scores for difference images and binary change maps; change is the positive class."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("auc", "oa", "f1", "kappa", "tp", "tn", "fp", "fn")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    auc: float | None
    oa: float
    f1: float
    kappa: float
    confusion: tuple[int, int, int, int]  # TP, TN, FP, FN

    def row(self) -> dict:
        tp, tn, fp, fn = self.confusion
        return {"auc": self.auc, "oa": self.oa, "f1": self.f1, "kappa": self.kappa,
                "tp": tp, "tn": tn, "fp": fp, "fn": fn}


def _flat_truth(d, truth):
    d = np.asarray(d, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if d.shape != truth.shape:
        raise MetricsError(f"difference image {d.shape} and truth {truth.shape} differ in shape")
    return d.ravel(), truth.ravel()


def roc_curve(d, truth) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """False/true positive rates for every distinct threshold ``t`` (change iff ``d >= t``).

    Returns ``(fpr, tpr, thresholds)`` starting at (0, 0) with an infinite threshold.
    """
    d, truth = _flat_truth(d, truth)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC is undefined when truth contains a single class")
    order = np.argsort(-d, kind="stable")
    ds, ts = d[order], truth[order]
    # last index of each run of equal values (descending order)
    ends = np.flatnonzero(np.r_[ds[1:] != ds[:-1], True])
    tp = np.cumsum(ts)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr, np.r_[np.inf, ds[ends]]


def roc_auc(d, truth) -> float:
    """Trapezoidal area under the ROC; tied scores count one half.

    The trapezoids are summed in integer counts and divided once, so the
    result equals the normalised Mann-Whitney statistic to the last bit.
    """
    d, truth = _flat_truth(d, truth)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC is undefined when truth contains a single class")
    order = np.argsort(-d, kind="stable")
    ds, ts = d[order], truth[order]
    ends = np.flatnonzero(np.r_[ds[1:] != ds[:-1], True])
    tp = np.r_[0, np.cumsum(ts, dtype=np.int64)[ends]]
    fp = np.r_[0, ends + 1 - tp[1:]]
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1]), dtype=np.int64))
    return twice_area / (2 * n_pos * n_neg)


def confusion(mask, truth) -> tuple[int, int, int, int]:
    mask = np.asarray(mask, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if mask.shape != truth.shape:
        raise MetricsError(f"mask {mask.shape} and truth {truth.shape} differ in shape")
    tp = int(np.sum(mask & truth))
    tn = int(np.sum(~mask & ~truth))
    fp = int(np.sum(mask & ~truth))
    fn = int(np.sum(~mask & truth))
    return tp, tn, fp, fn


def scores_from_confusion(tp: int, tn: int, fp: int, fn: int) -> tuple[float, float, float]:
    """``(OA, F1, kappa)`` from confusion counts."""
    n = tp + tn + fp + fn
    if n == 0:
        raise MetricsError("empty confusion matrix")
    oa = (tp + tn) / n
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
    p_e = ((tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)) / (n * n)
    kappa = (oa - p_e) / (1.0 - p_e) if p_e < 1.0 else (1.0 if oa == 1.0 else 0.0)
    return oa, f1, kappa


def binary_metrics(mask, truth, d=None) -> MetricsReport:
    """OA, F1 and Cohen's kappa of a change map; AUC too when ``d`` is given."""
    counts = confusion(mask, truth)
    oa, f1, kappa = scores_from_confusion(*counts)
    auc = roc_auc(d, truth) if d is not None else None
    return MetricsReport(auc, oa, f1, kappa, counts)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_report(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS)
        row = report.row()
        wr.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_report(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise MetricsError(f"{path}: expected one data row, found {len(rows)}")
    return rows[0]
