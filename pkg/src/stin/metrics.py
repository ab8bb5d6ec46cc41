from __future__ import annotations

import numpy as np


def top_k_accuracy(proba: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` highest scores.

    Ties are broken towards the lower class index, as ``argsort`` is stable.
    """
    proba = np.asarray(proba)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    k = min(k, proba.shape[1])
    order = np.argsort(-proba, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def summarize(proba: np.ndarray, labels: np.ndarray, class_names) -> dict:
    labels = np.asarray(labels)
    pred = np.argmax(proba, axis=1)
    per_class = {}
    for c, name in enumerate(class_names):
        mask = labels == c
        if mask.any():
            per_class[str(name)] = float(np.mean(pred[mask] == c))
    return {
        "n": int(len(labels)),
        "top1": top_k_accuracy(proba, labels, 1),
        "top5": top_k_accuracy(proba, labels, 5),
        "per_class": per_class,
    }
