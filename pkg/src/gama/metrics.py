"""Scoring: hamming score, top-1 accuracy, multi-label thresholding,
and the context-consistency score of perturbed predictions."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def predict_multilabel(logits: np.ndarray) -> np.ndarray:
    """Threshold sigmoid outputs at 0.5, which is logits >= 0."""
    return (np.asarray(logits) >= 0.0).astype(np.uint8)


def hamming_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean per-sample |Y ∩ Ŷ| / |Y ∪ Ŷ| as a percentage; an empty
    prediction against an empty truth counts as a perfect match."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ConfigError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ConfigError("need a nonempty (N, C) prediction matrix")
    inter = (pred & truth).sum(axis=1).astype(np.float64)
    union = (pred | truth).sum(axis=1).astype(np.float64)
    per = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return float(per.mean() * 100.0)


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Argmax match rate as a percentage; ties go to the lowest index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ConfigError("need a nonempty (N, C) logit matrix")
    if labels.shape != (logits.shape[0],):
        raise ConfigError(f"labels shape {labels.shape} does not match "
                          f"{logits.shape[0]} rows")
    return float((logits.argmax(axis=1) == labels).mean() * 100.0)


def cooccurrence_of_predictions(pred: np.ndarray) -> np.ndarray:
    """Binary C x C matrix with [i, j] set iff classes i and j are
    co-predicted on at least one sample."""
    pred = np.asarray(pred, dtype=bool)
    both = (pred[:, :, None] & pred[:, None, :]).any(axis=0)
    np.fill_diagonal(both, False)
    return both.astype(np.uint8)


def context_consistency_score(pred: np.ndarray, o_matrix: np.ndarray,
                              accuracy: float) -> float:
    """Harmonic mean of the perturbed predictions' co-occurrence
    precision and the misclassification rate 1 - accuracy.

    Precision = set bits of (O_pred AND O) / set bits of O_pred over the
    upper triangle; no predicted pairs at all counts as precision 1."""
    if not 0.0 <= accuracy <= 1.0:
        raise ConfigError(f"accuracy must be a fraction, got {accuracy}")
    o_pred = cooccurrence_of_predictions(pred)
    iu = np.triu_indices(o_pred.shape[0], 1)
    total = int(o_pred[iu].sum())
    if total == 0:
        p = 1.0
    else:
        hits = int((o_pred[iu] & np.asarray(o_matrix, dtype=np.uint8)[iu]).sum())
        p = hits / total
    m = 1.0 - accuracy
    if p + m == 0.0:
        return 0.0
    return 2.0 * p * m / (p + m)
