"""Evaluation metrics for 4-stage ordinal classification: accuracy, macro
F1, one-vs-rest macro AUROC, quadratic weighted kappa, expected calibration
error with reliability bins, and the Brier score, plus the plain-text
prediction dump and report formats the pipeline exchanges.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DataError

N_CLASSES = 4
DEFAULT_BINS = 10


def _validate(labels: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("empty label array")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return labels


def _validate_probs(labels: np.ndarray, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = _validate(labels)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise DataError(f"probability matrix shape {probs.shape} does not match {labels.shape[0]} labels")
    if probs.shape[1] != N_CLASSES:
        raise DataError(f"expected {N_CLASSES} probability columns, got {probs.shape[1]}")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-5):
        raise DataError("probability rows must sum to 1")
    return labels, probs


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = _validate(labels, n_classes)
    preds = _validate(preds, n_classes)
    if labels.shape != preds.shape:
        raise DataError("labels and predictions differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def confusion_metrics(labels, preds) -> tuple[float, float, np.ndarray]:
    """Accuracy, macro F1 over classes present in the labels, and per-class
    recall (NaN for classes absent from the labels)."""
    cm = confusion_matrix(labels, preds)
    n = cm.sum()
    acc = float(np.trace(cm) / n)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)
    f1s = []
    per_class = np.full(N_CLASSES, np.nan)
    for c in range(N_CLASSES):
        if support[c] > 0:
            per_class[c] = tp[c] / support[c]
            denom = 2 * tp[c] + (predicted[c] - tp[c]) + (support[c] - tp[c])
            f1s.append(2 * tp[c] / denom if denom > 0 else 0.0)
    return acc, float(np.mean(f1s)), per_class


def kappa_quadratic(labels, preds) -> float:
    """Cohen's kappa with quadratic penalties (i - j)^2 / (K - 1)^2."""
    cm = confusion_matrix(labels, preds).astype(np.float64)
    n = cm.sum()
    observed = cm / n
    expected = np.outer(cm.sum(axis=1), cm.sum(axis=0)) / (n * n)
    idx = np.arange(N_CLASSES)
    w = (idx[:, None] - idx[None, :]) ** 2 / (N_CLASSES - 1) ** 2
    denom = float((w * expected).sum())
    if denom == 0.0:
        # Both raters constant: agreement is perfect by construction.
        if float((w * observed).sum()) == 0.0:
            return 1.0
        raise DataError("kappa undefined: degenerate marginals with disagreement")
    return float(1.0 - (w * observed).sum() / denom)


def _binary_auc(y: np.ndarray, scores: np.ndarray) -> float:
    """Rank-statistic AUC with midrank tie handling."""
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(scores)
    return float((ranks[y.astype(bool)].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auroc_ovr(labels, probs) -> float:
    """One-vs-rest AUROC, macro-averaged over classes present in labels."""
    labels, probs = _validate_probs(labels, probs)
    aucs = []
    for c in range(N_CLASSES):
        y = (labels == c).astype(np.int64)
        if y.sum() == 0 or y.sum() == y.size:
            warnings.warn(f"class {c} absent from labels (or its complement); excluded from macro AUROC")
            continue
        aucs.append(_binary_auc(y, probs[:, c]))
    if not aucs:
        raise DataError("AUROC undefined: no class with both positives and negatives")
    return float(np.mean(aucs))


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


def ece(labels, probs, n_bins: int = DEFAULT_BINS) -> tuple[float, list[ReliabilityBin]]:
    """Expected calibration error over equal-width confidence bins on (0, 1].

    Returns the scalar plus the full bin table (empty bins carry NaN for
    confidence and accuracy) for reliability-diagram plotting.
    """
    if n_bins < 1:
        raise DataError(f"need at least one bin, got {n_bins}")
    labels, probs = _validate_probs(labels, probs)
    conf = probs.max(axis=1)
    preds = probs.argmax(axis=1)
    correct = (preds == labels).astype(np.float64)
    edges = np.arange(1, n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="left"), 0, n_bins - 1)
    n = labels.size
    total = 0.0
    bins = []
    for m in range(n_bins):
        members = idx == m
        count = int(members.sum())
        if count:
            acc = float(correct[members].mean())
            mean_conf = float(conf[members].mean())
            total += count / n * abs(acc - mean_conf)
        else:
            acc = mean_conf = float("nan")
        bins.append(ReliabilityBin(m / n_bins, (m + 1) / n_bins, count, mean_conf, acc))
    return float(total), bins


def ece_from_bins(bins: list[ReliabilityBin]) -> float:
    n = sum(b.count for b in bins)
    return float(
        sum(b.count / n * abs(b.accuracy - b.mean_confidence) for b in bins if b.count)
    )


def brier(labels, probs) -> float:
    """Mean squared distance between probability rows and one-hot labels."""
    labels, probs = _validate_probs(labels, probs)
    onehot = np.eye(N_CLASSES)[labels]
    return float(((probs - onehot) ** 2).sum(axis=1).mean())


@dataclass
class EvalReport:
    n: int
    acc: float
    f1_macro: float
    auroc_macro: float
    kappa_qw: float
    ece: float
    brier: float
    per_class_acc: list[float] = field(default_factory=list)
    reliability: list[ReliabilityBin] = field(default_factory=list)

    SCALARS = ("acc", "f1_macro", "auroc_macro", "kappa_qw", "ece", "brier")

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCALARS}


def evaluate_predictions(labels, probs, n_bins: int = DEFAULT_BINS) -> EvalReport:
    labels, probs = _validate_probs(labels, probs)
    acc, f1m, per_class = confusion_metrics(labels, probs.argmax(axis=1))
    ece_val, bins = ece(labels, probs, n_bins)
    return EvalReport(
        n=int(labels.size),
        acc=acc,
        f1_macro=f1m,
        auroc_macro=auroc_ovr(labels, probs),
        kappa_qw=kappa_quadratic(labels, probs.argmax(axis=1)),
        ece=ece_val,
        brier=brier(labels, probs),
        per_class_acc=[float(x) for x in per_class],
        reliability=bins,
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------
#
# Prediction dump: one tab-separated record per sample,
#   id <TAB> label <TAB> p0 <TAB> p1 <TAB> p2 <TAB> p3
# Report: "name <TAB> value" lines; per_class_acc holds four values.
# Reliability CSV columns: bin_lo, bin_hi, count, mean_confidence, accuracy.


def write_predictions(path: str, ids: list[str], labels: np.ndarray, probs: np.ndarray) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for sid, y, row in zip(ids, labels, probs):
            fh.write("\t".join([sid, str(int(y)), *(repr(float(p)) for p in row)]) + "\n")


def read_predictions(path: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise DataError(f"prediction dump not found: {path}")
    ids, labels, probs = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 + N_CLASSES:
                raise DataError(f"{path}:{lineno}: expected {2 + N_CLASSES} fields")
            ids.append(parts[0])
            labels.append(int(parts[1]))
            probs.append([float(p) for p in parts[2:]])
    return ids, np.array(labels, dtype=np.int64), np.array(probs, dtype=np.float64)


def write_report(path: str, report: EvalReport) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"n\t{report.n}\n")
        for name, value in report.scalars().items():
            fh.write(f"{name}\t{value!r}\n")
        fh.write("per_class_acc\t" + "\t".join(repr(v) for v in report.per_class_acc) + "\n")


def read_report(path: str) -> dict[str, object]:
    if not os.path.isfile(path):
        raise DataError(f"report not found: {path}")
    out: dict[str, object] = {}
    with open(path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "n":
                out["n"] = int(parts[1])
            elif parts[0] == "per_class_acc":
                out["per_class_acc"] = [float(v) for v in parts[1:]]
            else:
                out[parts[0]] = float(parts[1])
    return out


def write_reliability_csv(path: str, bins: list[ReliabilityBin]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "mean_confidence", "accuracy"])
        for b in bins:
            writer.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.mean_confidence), repr(b.accuracy)])


def read_reliability_csv(path: str) -> list[ReliabilityBin]:
    if not os.path.isfile(path):
        raise DataError(f"reliability CSV not found: {path}")
    bins = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            bins.append(
                ReliabilityBin(
                    lo=float(row["bin_lo"]),
                    hi=float(row["bin_hi"]),
                    count=int(row["count"]),
                    mean_confidence=float(row["mean_confidence"]),
                    accuracy=float(row["accuracy"]),
                )
            )
    return bins
