"""Calibration and misclassification-ranking metrics.

Conventions:

* confidence is the max class probability, prediction its argmax (lowest
  index on ties), and ``correct`` means prediction == label;
* ECE uses equal-width, right-closed bins (lo, hi]; confidence 0 goes to
  the first bin;
* AURC averages the selective risk over every coverage level j / n, samples
  ordered by decreasing confidence with ties kept in index order;
* FPR@95%TPR treats correct predictions as positives and thresholds the
  confidence as a step function (no interpolation);
* AUPR-Err treats errors as positives scored by -confidence and sums
  (R_i - R_{i-1}) * P_i over the distinct thresholds.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, fields

import numpy as np

from dreg.errors import ConfigError, UndefinedMetricError

PROB_FLOOR = 1e-300
DEFAULT_BINS = 15


class PredictionSet:
    """Probability rows and true labels, with derived confidence/correctness."""

    __slots__ = ("probs", "labels", "confidences", "predictions", "correct")

    def __init__(self, probs, labels):
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ConfigError("probs must be a non-empty n x K array")
        y = np.asarray(labels).astype(np.int64).reshape(-1)
        if y.shape[0] != p.shape[0]:
            raise ConfigError("need one label per probability row")
        if np.any(y < 0) or np.any(y >= p.shape[1]):
            raise ConfigError("label out of range")
        self.probs = p
        self.labels = y
        self.predictions = np.argmax(p, axis=1)
        self.confidences = p[np.arange(p.shape[0]), self.predictions]
        self.correct = self.predictions == y

    @classmethod
    def from_confidences(cls, confidences, correct):
        """Build rows whose max is exactly ``confidences`` at class 0.

        The remaining mass is spread evenly over enough extra classes that
        none exceeds the confidence; the label is 0 when correct, else 1.
        """
        c = np.asarray(confidences, dtype=np.float64).reshape(-1)
        ok = np.asarray(correct, dtype=bool).reshape(-1)
        if c.shape != ok.shape or c.size == 0:
            raise ConfigError("confidences and correct must be non-empty and equally long")
        if np.any(c <= 0) or np.any(c > 1):
            raise ConfigError("confidences must lie in (0, 1]")
        k = int(max(2, np.max(np.ceil((1.0 - c) / c)) + 1))
        probs = np.empty((c.size, k))
        probs[:, 0] = c
        probs[:, 1:] = ((1.0 - c) / (k - 1))[:, None]
        return cls(probs, np.where(ok, 0, 1))

    def __len__(self):
        return self.probs.shape[0]

    def subset(self, mask) -> "PredictionSet":
        return PredictionSet(self.probs[mask], self.labels[mask])


@dataclass
class ReliabilityBins:
    n_bins: int
    lower: np.ndarray
    upper: np.ndarray
    count: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "conf", "acc"])
        for lo, hi, c, cf, ac in zip(self.lower, self.upper, self.count, self.confidence, self.accuracy):
            w.writerow([f"{lo:.17g}", f"{hi:.17g}", int(c), "" if c == 0 else f"{cf:.17g}", "" if c == 0 else f"{ac:.17g}"])
        return buf.getvalue()


def bin_edges(n_bins: int) -> np.ndarray:
    """Edges b / n_bins, each a correctly rounded division."""
    return np.arange(int(n_bins) + 1) / int(n_bins)


def bin_index(confidences, n_bins: int) -> np.ndarray:
    """Index of the right-closed bin (edges[i], edges[i+1]] holding each value."""
    edges = bin_edges(n_bins)
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, int(n_bins) - 1)


def reliability_bins(confidences, correct, n_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    if int(n_bins) < 1:
        raise ConfigError("n_bins must be >= 1")
    c = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    idx = bin_index(c, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    # np.mean per bin, so a single bin reduces exactly like the global mean
    order = np.argsort(idx, kind="stable")
    cuts = np.cumsum(count)[:-1]
    mean_conf = np.zeros(int(n_bins))
    acc = np.zeros(int(n_bins))
    for b, (cb, okb) in enumerate(zip(np.split(c[order], cuts), np.split(ok[order], cuts))):
        if cb.size:
            mean_conf[b] = np.mean(cb)
            acc[b] = np.mean(okb)
    edges = bin_edges(n_bins)
    return ReliabilityBins(int(n_bins), edges[:-1], edges[1:], count, mean_conf, acc)


def ece(preds: PredictionSet, n_bins: int = DEFAULT_BINS):
    """Return (ECE, ReliabilityBins)."""
    bins = reliability_bins(preds.confidences, preds.correct, n_bins)
    n = len(preds)
    value = float(np.sum(bins.count / n * np.abs(bins.accuracy - bins.confidence)))
    return value, bins


def accuracy(preds: PredictionSet) -> float:
    return float(np.mean(preds.correct))


def brier(preds: PredictionSet) -> float:
    """Mean over samples of the squared distance to the one-hot label."""
    onehot = np.zeros_like(preds.probs)
    onehot[np.arange(len(preds)), preds.labels] = 1.0
    return float(np.mean(np.sum((preds.probs - onehot) ** 2, axis=1)))


def nll(preds: PredictionSet) -> float:
    py = preds.probs[np.arange(len(preds)), preds.labels]
    return float(np.mean(-np.log(np.maximum(py, PROB_FLOOR))))


def _confidence_order(conf):
    return np.argsort(-np.asarray(conf, dtype=np.float64), kind="stable")


def risk_coverage(preds: PredictionSet):
    """(coverage, risk) at every coverage level j / n, j = 1..n."""
    n = len(preds)
    errors = (~preds.correct[_confidence_order(preds.confidences)]).astype(np.float64)
    j = np.arange(1, n + 1, dtype=np.float64)
    return j / n, np.cumsum(errors) / j


def aurc_eaurc(preds: PredictionSet):
    """Return (AURC, excess AURC over the best possible ranking)."""
    n = len(preds)
    _, risk = risk_coverage(preds)
    aurc = float(np.mean(risk))
    n_err = int(np.sum(~preds.correct))
    j = np.arange(1, n + 1, dtype=np.float64)
    optimal = float(np.mean(np.maximum(j - (n - n_err), 0.0) / j))
    return aurc, aurc - optimal


def risk_coverage_csv(preds: PredictionSet) -> str:
    cov, risk = risk_coverage(preds)
    lines = ["coverage,risk"] + [f"{c:.17g},{r:.17g}" for c, r in zip(cov, risk)]
    return "\n".join(lines) + "\n"


def fpr_at_95tpr(preds: PredictionSet, tpr_percent: int = 95) -> float:
    """Fraction of errors accepted at the highest threshold keeping >= 95% of correct samples."""
    conf = preds.confidences
    pos = np.sort(conf[preds.correct])[::-1]
    neg = conf[~preds.correct]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("FPR@95%TPR needs both correct and incorrect predictions")
    # smallest k with k / n_pos >= 0.95, in exact integer arithmetic
    k = -(-tpr_percent * pos.size // 100)
    threshold = pos[k - 1]
    return float(np.mean(neg >= threshold))


def aupr_err(preds: PredictionSet) -> float:
    """Average precision for detecting errors with score = -confidence."""
    is_err = ~preds.correct
    n_pos = int(is_err.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPR-Err needs at least one incorrect prediction")
    score = -preds.confidences
    order = np.argsort(-score, kind="stable")
    s_sorted = score[order]
    tp = np.cumsum(is_err[order])
    fp = np.cumsum(~is_err[order])
    # last position of each run of equal scores = one threshold
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    tp, fp = tp[last].astype(np.float64), fp[last].astype(np.float64)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    recall_prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - recall_prev) * precision))


@dataclass
class MetricsReport:
    accuracy: float | None = None
    ece: float | None = None
    brier: float | None = None
    nll: float | None = None
    aurc: float | None = None
    eaurc: float | None = None
    aupr_err: float | None = None
    fpr_at_95tpr: float | None = None

    def to_dict(self) -> dict:
        """Only the defined metrics; undefined ones are omitted, never zeroed."""
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def full_report(preds: PredictionSet, n_bins: int = DEFAULT_BINS) -> MetricsReport:
    rep = MetricsReport(
        accuracy=accuracy(preds),
        ece=ece(preds, n_bins)[0],
        brier=brier(preds),
        nll=nll(preds),
    )
    rep.aurc, rep.eaurc = aurc_eaurc(preds)
    try:
        rep.aupr_err = aupr_err(preds)
    except UndefinedMetricError:
        pass
    try:
        rep.fpr_at_95tpr = fpr_at_95tpr(preds)
    except UndefinedMetricError:
        pass
    return rep


_NUM = {"type": "number"}
METRICS_SCHEMA = {
    "type": "object",
    "properties": {f.name: _NUM for f in fields(MetricsReport)},
    "required": ["accuracy", "ece", "brier", "nll", "aurc", "eaurc"],
    "additionalProperties": False,
}

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "n_bins": {"type": "integer", "minimum": 1},
        "all": {
            "type": "object",
            "properties": {"n": {"type": "integer"}, "metrics": METRICS_SCHEMA},
            "required": ["n", "metrics"],
        },
        "hard": {
            "type": "object",
            "properties": {"n": {"type": "integer"}, "metrics": METRICS_SCHEMA},
            "required": ["n", "metrics"],
        },
        "notes": {"type": "array", "items": {"type": "string"}},
        "config": {"type": "object"},
    },
    "required": ["n_bins", "all", "notes", "config"],
}
