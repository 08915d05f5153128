"""Task metrics: accuracy, macro-F1, AUPRC and MSE."""

from __future__ import annotations

import numpy as np

METRICS = ("accuracy", "macro_f1", "auprc", "mse")
# reported as percentages in result tables
PERCENT_METRICS = ("accuracy", "macro_f1", "auprc")


def _labels(pred) -> np.ndarray:
    pred = np.asarray(pred)
    return pred.argmax(-1) if pred.ndim == 2 else pred.astype(np.int64)


def _check(pred, target):
    if len(pred) != len(target):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(target)} targets")
    if len(target) == 0:
        raise ValueError("metrics need at least one sample")


def accuracy(pred, target) -> float:
    _check(pred, target)
    return float(np.mean(_labels(pred) == np.asarray(target)))


def macro_f1(pred, target) -> float:
    """Unweighted mean of per-class F1 over classes seen in predictions or targets."""
    _check(pred, target)
    p, t = _labels(pred), np.asarray(target)
    scores = []
    for c in np.union1d(p, t):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def average_precision(scores, positive) -> float:
    """Step-wise area under the precision-recall curve, thresholds at distinct scores."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    tp = np.cumsum(y)
    # keep only the last index of each block of tied scores
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auprc(scores, target) -> float:
    """Binary AUPRC on positive-class scores, or macro one-vs-rest for ``[N, K]`` scores.

    Classes without positive targets are left out of the macro average.
    """
    scores, target = np.asarray(scores, dtype=np.float64), np.asarray(target)
    _check(scores, target)
    if scores.ndim == 1:
        return average_precision(scores, target == 1)
    if scores.shape[1] == 2:
        return average_precision(scores[:, 1], target == 1)
    per_class = [average_precision(scores[:, c], target == c)
                 for c in range(scores.shape[1]) if np.any(target == c)]
    return float(np.mean(per_class))


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check(pred, target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


_FUNCS = {"accuracy": accuracy, "macro_f1": macro_f1, "auprc": auprc, "mse": mse}


def compute_metric(name: str, predictions, targets) -> float:
    try:
        fn = _FUNCS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; choose from {', '.join(METRICS)}") from None
    return fn(predictions, targets)
