"""Evaluation metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ..errors import ContractError, UndefinedMetricError


def auc(scores, labels) -> float:
    """ROC AUC as the probability a random positive outranks a random negative.

    Tied scores count one half (average ranks).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ContractError(f"{len(s)} scores for {len(y)} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def mae(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape or len(p) == 0:
        raise ContractError(f"mae needs equal non-empty lengths, got {len(p)} and {len(t)}")
    return float(np.mean(np.abs(p - t)))
