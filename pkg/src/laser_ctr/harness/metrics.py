"""Loss and ranking metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

PROB_CLIP = 1e-7


def bce_loss(pred, label):
    """Binary cross-entropy and its derivative w.r.t. the logit.

    Accepts scalars or arrays; predictions are clipped to
    ``[1e-7, 1 - 1e-7]``. Returns ``(mean loss, dloss/dlogit per sample)``.
    With a sigmoid output the logit gradient of one sample is ``pred - label``.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_CLIP, 1 - PROB_CLIP)
    y = np.asarray(label, dtype=np.float64)
    loss = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return float(np.mean(loss)), p - y


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def log_loss(scores, labels) -> float:
    return bce_loss(scores, labels)[0]
