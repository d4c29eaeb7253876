"""AUC (Mann-Whitney form) and accuracy."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def binary_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    ranks = rankdata(scores)  # average ranks: a tie counts one half
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """ROC AUC in [0, 1].

    ``scores`` 1-D: score of the positive class for binary labels.
    ``scores`` 2-D [n, K]: class probabilities; macro one-vs-rest average over
    the classes present in ``labels``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if scores.ndim == 1:
        if len(np.unique(labels)) != 2:
            raise UndefinedMetricError(f"binary AUC needs two classes, got {np.unique(labels).tolist()}")
        positive = labels == labels.max()
        return binary_auc(scores, positive)
    if scores.ndim == 2 and scores.shape[1] == 2:
        return auc(scores[:, 1], labels) if len(np.unique(labels)) == 2 else _raise_single()
    present = np.unique(labels)
    if len(present) < 2:
        _raise_single()
    return float(np.mean([binary_auc(scores[:, k], labels == k) for k in present]))


def _raise_single():
    raise UndefinedMetricError("AUC is undefined for single-class labels")


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred).ravel()
    labels = np.asarray(labels).ravel()
    if pred.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(np.mean(pred == labels))
