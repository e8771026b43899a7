"""Classification quality and calibration metrics."""

from dataclasses import asdict, dataclass

import numpy as np

from laplace_kit.errors import InvalidDistribution, MissingData

LOG_FLOOR = 1e-12


@dataclass
class MetricsReport:
    nll: float
    accuracy: float
    mean_confidence: float
    ece: float
    brier: float

    def to_dict(self):
        return asdict(self)


def _check_probs(probs, labels, atol=1e-6):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise InvalidDistribution("probs must be (N, C) with one label per row")
    if probs.size and (np.any(probs < -atol) or np.any(np.abs(probs.sum(axis=1) - 1.0) > atol)):
        raise InvalidDistribution("rows are not probability vectors")
    return probs, labels


def expected_calibration_error(confidences, correct, n_bins=10):
    """Sample-weighted gap between accuracy and confidence over equal-width bins on (0, 1]."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    n = confidences.size
    if n == 0:
        return 0.0
    bins = np.clip(np.ceil(confidences * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        in_bin = bins == b
        count = np.count_nonzero(in_bin)
        if count:
            ece += count / n * abs(correct[in_bin].mean() - confidences[in_bin].mean())
    return float(ece)


def evaluate_classification(probs, labels, n_bins=10):
    probs, labels = _check_probs(probs, labels)
    n = labels.size
    if n == 0:
        raise MissingData("no samples to evaluate")
    rows = np.arange(n)
    p_true = probs[rows, labels]
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    onehot = np.zeros_like(probs)
    onehot[rows, labels] = 1.0
    return MetricsReport(
        nll=float(-np.mean(np.log(np.maximum(p_true, LOG_FLOOR)))),
        accuracy=float(correct.mean()),
        mean_confidence=float(conf.mean()),
        ece=expected_calibration_error(conf, correct, n_bins),
        brier=float(np.mean(np.sum((probs - onehot) ** 2, axis=1))),
    )


def auroc(scores_negative, scores_positive):
    """P(positive score > negative score) + 0.5 P(tie), by rank counting."""
    neg = np.asarray(scores_negative, dtype=np.float64).ravel()
    pos = np.asarray(scores_positive, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise MissingData("auroc needs scores for both classes")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    below_or_equal = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (below_or_equal - below).sum()
    return float(wins / (pos.size * neg.size))


def entropy(probs):
    p = np.clip(np.asarray(probs, dtype=np.float64), LOG_FLOOR, None)
    return -np.sum(p * np.log(p), axis=-1)


def regression_nll(mean, var, y):
    """Mean Gaussian negative log-density with per-output variances."""
    mean, var, y = (np.asarray(a, dtype=np.float64) for a in (mean, var, y))
    y = y.reshape(mean.shape)
    return float(np.mean(np.sum(0.5 * (np.log(2 * np.pi * var) + (y - mean) ** 2 / var), axis=-1)))
