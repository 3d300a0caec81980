"""Binary ranking and threshold metrics."""

from __future__ import annotations

import numpy as np


class DegenerateLabelsError(ValueError):
    """Metric undefined because only one class is present."""


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be exactly 0 or 1")
    if y.min() == y.max():
        raise DegenerateLabelsError("both classes must be present")
    return s, y


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties
    counted half (the Mann-Whitney U formulation)."""
    s, y = _validate(scores, labels)
    order = np.argsort(s, kind="stable")
    sorted_scores = s[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balanced_accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Mean per-class recall; scores are probabilities compared against the
    threshold (pass logits through a sigmoid first)."""
    s, y = _validate(scores, labels)
    pred = (s >= threshold).astype(np.float64)
    recall_pos = float(pred[y == 1.0].mean())
    recall_neg = float(1.0 - pred[y == 0.0].mean())
    return 0.5 * (recall_pos + recall_neg)
