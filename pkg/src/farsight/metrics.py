"""Ternary classification metrics, Female-vs-Rest ROC/AUC, and stratified
reporting by view angle and distance/height bin."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import EvaluationError
from .ontology import FEMALE

CLASS_NAMES = ("male", "female", "unknown")


def classify(logits: np.ndarray) -> np.ndarray:
    """Argmax labels; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def p_female(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of the Female class, computed stably."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, FEMALE] / e.sum(axis=1)


@dataclass
class ConfusionMatrix3:
    """3x3 counts indexed [true][pred] over (male, female, unknown)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), dtype=np.int64))

    @classmethod
    def from_predictions(cls, labels, preds) -> "ConfusionMatrix3":
        cm = cls()
        for t, p in zip(np.asarray(labels), np.asarray(preds)):
            cm.counts[int(t), int(p)] += 1
        return cm

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def core_metrics(preds, labels) -> dict:
    """Accuracy, balanced accuracy, macro F1/precision, weighted recall.

    Class-averaged metrics run over the classes present in the ground truth,
    so strata missing a class stay well defined.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.size == 0:
        raise EvaluationError("predictions and labels must be equal-length and non-empty")
    cm = ConfusionMatrix3.from_predictions(labels, preds)
    c = cm.counts.astype(np.float64)
    present = [k for k in range(3) if c[k].sum() > 0]

    recalls, precisions, f1s, supports = [], [], [], []
    for k in present:
        tp = c[k, k]
        support = c[k].sum()
        predicted = c[:, k].sum()
        recall = tp / support
        precision = tp / predicted if predicted > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        recalls.append(recall)
        precisions.append(precision)
        f1s.append(f1)
        supports.append(support)

    supports = np.asarray(supports)
    return {
        "accuracy": float(np.trace(c) / c.sum()),
        "balanced_accuracy": float(np.mean(recalls)),
        "macro_f1": float(np.mean(f1s)),
        "macro_precision": float(np.mean(precisions)),
        "weighted_recall": float(np.sum(np.asarray(recalls) * supports) / supports.sum()),
        "confusion": cm,
    }


def auc_female_vs_rest(scores, labels) -> float:
    """Mann-Whitney AUC with midrank tie handling, Female as positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = labels == FEMALE
    n_pos = int(pos.sum())
    n_neg = int(scores.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC undefined: need at least one Female and one non-Female sample")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def operating_point(scores, labels, tau: float = 0.5) -> tuple[float, float]:
    """(TPR, TNR) at threshold tau: predict Female when score > tau."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = labels == FEMALE
    neg = ~pos
    if not pos.any() or not neg.any():
        raise EvaluationError("operating point undefined: both classes required")
    tpr = float((scores[pos] > tau).mean())
    tnr = float((scores[neg] <= tau).mean())
    return tpr, tnr


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) pairs swept over all distinct score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = labels == FEMALE
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC undefined: both classes required")
    points = [(0.0, 0.0)]
    for thr in sorted(set(scores), reverse=True):
        pred = scores >= thr
        tpr = float((pred & pos).sum() / n_pos)
        fpr = float((pred & ~pos).sum() / n_neg)
        points.append((fpr, tpr))
    points.append((1.0, 1.0))
    return points


@dataclass
class StratumReport:
    group: str                   # view-angle bucket, e.g. "30deg"
    range_label: str             # e.g. "D<=20m"
    mu_female: float | None
    mu_male: float | None
    tpr: float | None
    tnr: float | None
    auc: float | None
    n_female: int
    n_male: int
    n_total: int


def stratified_report(scores, gender_labels, stratum_keys, tau: float = 0.5) -> list[StratumReport]:
    """One report per (angle, bin) stratum present in ``stratum_keys``.

    Keys look like "30deg|D<=20m"; samples with missing metadata arrive under
    "unbinned". Metrics undefined inside a stratum are reported as None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    gender_labels = np.asarray(gender_labels, dtype=np.int64)
    keys = list(stratum_keys)
    if not (len(scores) == len(gender_labels) == len(keys)):
        raise EvaluationError("scores, labels and stratum keys must align")
    reports = []
    for key in sorted(set(keys)):
        idx = np.asarray([i for i, k in enumerate(keys) if k == key])
        s, y = scores[idx], gender_labels[idx]
        female, male = y == FEMALE, y == 0
        mu_f = float(s[female].mean()) if female.any() else None
        mu_m = float(s[male].mean()) if male.any() else None
        try:
            tpr, tnr = operating_point(s, y, tau)
        except EvaluationError:
            tpr = tnr = None
        try:
            auc = auc_female_vs_rest(s, y)
        except EvaluationError:
            auc = None
        group, _, range_label = key.partition("|")
        reports.append(StratumReport(group=group, range_label=range_label or key,
                                     mu_female=mu_f, mu_male=mu_m, tpr=tpr, tnr=tnr,
                                     auc=auc, n_female=int(female.sum()),
                                     n_male=int(male.sum()), n_total=len(idx)))
    return reports


def write_strata_csv(reports: list[StratumReport], path) -> None:
    def fmt(x):
        return "" if x is None else f"{x:.6f}"

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "range", "mu_F", "mu_M", "TPR", "TNR", "AUC", "n"])
        for r in reports:
            w.writerow([r.group, r.range_label, fmt(r.mu_female), fmt(r.mu_male),
                        fmt(r.tpr), fmt(r.tnr), fmt(r.auc), r.n_total])


def write_roc_csv(points: list[tuple[float, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            w.writerow([f"{fpr:.6f}", f"{tpr:.6f}"])
