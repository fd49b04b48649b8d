"""Classification, calibration, failure-prediction and OOD-detection metrics.

Confidence is always the maximum of the (Monte-Carlo averaged) class
probabilities.  Ranking metrics give half credit to ties; the risk-coverage
sweep keeps the original order among equal confidences.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, EmptyDump, EmptySet, NonBinaryLabels

METRIC_KEYS = ("acc", "mcc", "ece", "nll", "brier", "aurc", "auroc", "fpr95", "aupr")
PROB_CLAMP = 1e-12


@dataclass
class PredictionDump:
    probs: np.ndarray  # n x C
    labels: np.ndarray  # n

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or len(self.probs) != len(self.labels):
            raise ValueError(f"probs {self.probs.shape} vs labels {self.labels.shape}")

    def __len__(self):
        return len(self.labels)

    @property
    def preds(self):
        return self.probs.argmax(axis=1)

    @property
    def confidence(self):
        return self.probs.max(axis=1)

    @property
    def correct(self):
        return self.preds == self.labels


def bin_table(confidence, correct, n_bins=15):
    """Per-bin ``(lower, upper, count, accuracy, confidence)`` for bins ``(lo, hi]``; 0 joins bin 1."""
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        acc = float(correct[sel].mean()) if n else float("nan")
        conf = float(confidence[sel].mean()) if n else float("nan")
        rows.append((float(edges[b]), float(edges[b + 1]), n, acc, conf))
    return rows


def expected_calibration_error(confidence, correct, n_bins=15):
    n = len(confidence)
    if n == 0:
        raise EmptyDump("no predictions")
    ece = 0.0
    for _, _, count, acc, conf in bin_table(confidence, correct, n_bins):
        if count:
            ece += (count / n) * abs(acc - conf)
    return ece


def classification_metrics(dump: PredictionDump, n_bins=15):
    """Returns ``(acc, nll, brier, ece)``."""
    if len(dump) == 0:
        raise EmptyDump("no predictions")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    n = len(dump)
    rows = np.arange(n)
    acc = float(dump.correct.mean())
    nll = float(-np.mean(np.log(np.maximum(dump.probs[rows, dump.labels], PROB_CLAMP))))
    onehot = np.zeros_like(dump.probs)
    onehot[rows, dump.labels] = 1.0
    brier = float(np.mean(((dump.probs - onehot) ** 2).sum(axis=1)))
    ece = expected_calibration_error(dump.confidence, dump.correct, n_bins)
    return acc, nll, brier, ece


def mcc(dump: PredictionDump):
    """Matthews correlation for binary labels (class 1 positive)."""
    y, p = dump.labels, dump.preds
    if not (set(np.unique(y)) | set(np.unique(p))) <= {0, 1}:
        raise NonBinaryLabels("MCC needs labels in {0, 1}")
    tp = int(((p == 1) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def mcc_multiclass(dump: PredictionDump):
    """Gorodkin's K-class correlation; equals :func:`mcc` for two classes."""
    n_classes = max(dump.probs.shape[1], int(dump.labels.max()) + 1)
    C = np.zeros((n_classes, n_classes), dtype=np.float64)
    np.add.at(C, (dump.labels, dump.preds), 1.0)
    t, p = C.sum(axis=1), C.sum(axis=0)
    n, c = C.sum(), np.trace(C)
    denom = math.sqrt((n * n - p @ p) * (n * n - t @ t))
    return 0.0 if denom == 0 else float((c * n - t @ p) / denom)


def _auroc(pos, neg):
    scores = np.concatenate([pos, neg])
    ranks = rankdata(scores)  # average ranks: ties count half
    n_p, n_n = len(pos), len(neg)
    u = ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0
    return float(u / (n_p * n_n))


def aurc(confidence, correct):
    """Mean selective risk over coverages 1/n, 2/n, ..., 1."""
    confidence = np.asarray(confidence, dtype=np.float64)
    errors = 1.0 - np.asarray(correct, dtype=np.float64)
    if len(confidence) == 0:
        raise EmptyDump("no predictions")
    order = np.argsort(-confidence, kind="stable")
    risk = np.cumsum(errors[order]) / np.arange(1, len(order) + 1)
    return float(risk.mean())


def fpr_at_tpr(pos, neg, tpr=0.95):
    """Smallest FPR over thresholds ``score >= t`` that keep TPR >= ``tpr``."""
    pos, neg = np.sort(pos), np.sort(neg)
    best = 1.0
    for t in np.unique(np.concatenate([pos, neg])):
        tp = (len(pos) - np.searchsorted(pos, t, side="left")) / len(pos)
        if tp >= tpr:
            best = min(best, (len(neg) - np.searchsorted(neg, t, side="left")) / len(neg))
    return float(best)


def average_precision(pos, neg):
    """Area under precision-recall with a step at each distinct threshold."""
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]  # end of each tie group
    tp = np.cumsum(is_pos)[last]
    seen = last + 1
    precision = tp / seen
    recall = tp / len(pos)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def failure_metrics(confidence, correct):
    """Returns ``(aurc, auroc, fpr95)`` with correct predictions as positives."""
    confidence = np.asarray(confidence, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    risk = aurc(confidence, correct)
    if correct.all() or not correct.any():
        raise DegenerateLabels("need both correct and incorrect predictions")
    pos, neg = confidence[correct], confidence[~correct]
    return risk, _auroc(pos, neg), fpr_at_tpr(pos, neg)


def ood_metrics(id_scores, ood_scores):
    """Returns ``(auroc, aupr)`` treating in-distribution as positive."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    if len(id_scores) == 0 or len(ood_scores) == 0:
        raise EmptySet("both score sets must be non-empty")
    return _auroc(id_scores, ood_scores), average_precision(id_scores, ood_scores)


@dataclass
class MetricsReport:
    acc: float | None = None
    mcc: float | None = None
    ece: float | None = None
    nll: float | None = None
    brier: float | None = None
    aurc: float | None = None
    auroc: float | None = None
    fpr95: float | None = None
    aupr: float | None = None

    def values(self):
        return asdict(self)

    def table1(self):
        """Table-style rendering: percentages, AURC x 1e3, NLL x 10."""
        scale = {"aurc": 1e3, "nll": 10.0}
        return {k: (None if v is None else v * scale.get(k, 100.0)) for k, v in self.values().items()}


def evaluate_predictions(dump: PredictionDump, n_bins=15) -> MetricsReport:
    """All nine metrics; failure-prediction AUPR uses correct predictions as positives.

    Ranking metrics are left as ``None`` when every prediction is correct
    (or every one wrong).
    """
    acc, nll, brier, ece = classification_metrics(dump, n_bins)
    rep = MetricsReport(acc=acc, nll=nll, brier=brier, ece=ece, mcc=mcc_multiclass(dump))
    rep.aurc = aurc(dump.confidence, dump.correct)
    correct = dump.correct
    if correct.any() and not correct.all():
        _, rep.auroc, rep.fpr95 = failure_metrics(dump.confidence, correct)
        rep.aupr = average_precision(dump.confidence[correct], dump.confidence[~correct])
    return rep
