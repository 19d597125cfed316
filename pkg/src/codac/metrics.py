"""Binary classification metrics and the representation separability score."""
from __future__ import annotations

import numpy as np


def _labels(y) -> np.ndarray:
    y = np.asarray(y).astype(int).ravel()
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def confusion_metrics(y, prob, threshold: float = 0.5) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1) with predictions ``prob >= threshold``.

    Precision, recall and F1 are 0 when their denominator is 0.
    """
    y = _labels(y)
    if y.size == 0:
        raise ValueError("need at least one sample")
    pred = (np.asarray(prob, dtype=np.float64).ravel() >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    acc = (tp + tn) / y.size
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    ranks[order] = np.arange(1, len(s) + 1)
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=ranks)
    return (sums / counts)[inv]


def auroc(y, scores) -> float:
    """Mann-Whitney AUROC: (wins + ties / 2) / (n_pos * n_neg)."""
    y = _labels(y)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    r = _average_ranks(s)
    return float((r[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc(y, scores) -> float:
    """Average precision: sum over descending distinct thresholds of precision * recall gain."""
    y = _labels(y)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    n_pred = ends + 1
    prec = tp / n_pred
    d_rec = np.diff(np.r_[0, tp]) / n_pos
    return float((prec * d_rec).sum())


def rep_sep_score(embeddings, labels) -> float:
    """100 * (mean cosine silhouette + 1) / 2 using the true labels as clusters.

    A point alone in its class has intra-cluster distance 0.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = _labels(labels)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("embeddings must be (n, d) matching labels")
    if len(set(y.tolist())) < 2:
        raise ValueError("separability needs both classes present")
    if y.size < 2:
        raise ValueError("need at least two points")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroDivisionError("cosine distance undefined for a zero embedding")
    Xn = X / norms
    dist = np.clip(1.0 - Xn @ Xn.T, 0.0, 2.0)
    sil = np.empty(y.size)
    for i in range(y.size):
        same = y == y[i]
        same[i] = False
        other = y != y[i]
        a = dist[i, same].mean() if same.any() else 0.0
        b = dist[i, other].mean()
        m = max(a, b)
        sil[i] = (b - a) / m if m > 0 else 0.0
    return float(100.0 * (sil.mean() + 1.0) / 2.0)
