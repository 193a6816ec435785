"""
Per-counterfactual quality metrics and the paired sign test.

    l2 / linf     distance to the reference in latent space
    yNN           fraction of the k nearest training rows whose PREDICTED
                  label is the target (ties: lowest row index first)
    redundancy    changed coordinates that can each be reverted alone while
                  the argmax stays the target
    diversity     mean pairwise l2 over the counterfactuals of one reference;
                  None with fewer than two
"""

from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import binomtest

from cf_utils.errors import InsufficientDataError
from cf_utils.models import SplitClassifier, predict

K_YNN = 5
CHANGE_TOL = 1e-9


def metric_l2(cf, reference) -> float:
    return float(np.linalg.norm(np.asarray(cf, dtype=float) - np.asarray(reference, dtype=float)))


def metric_linf(cf, reference) -> float:
    return float(np.max(np.abs(np.asarray(cf, dtype=float) - np.asarray(reference, dtype=float)), initial=0.0))


def metric_ynn(cf, rows, preds, target: int, k: int = K_YNN) -> float:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[0] < k:
        raise InsufficientDataError(f"yNN with k={k} needs at least {k} rows, got {rows.shape[0]}", k, rows.shape[0])
    d = np.sum((rows - np.asarray(cf, dtype=float)) ** 2, axis=1)
    nearest = np.argsort(d, kind="stable")[:k]
    return float(np.mean(np.asarray(preds)[nearest] == target))


def metric_redundancy(cf, reference, clf: SplitClassifier, target: int) -> int:
    cf = np.asarray(cf, dtype=float)
    reference = np.asarray(reference, dtype=float)
    changed = np.flatnonzero(np.abs(cf - reference) > CHANGE_TOL)
    if changed.size == 0:
        return 0
    reverted = np.tile(cf, (changed.size, 1))
    reverted[np.arange(changed.size), changed] = reference[changed]
    return int(np.sum(predict(clf, reverted) == target))


def metric_diversity(cfs) -> Optional[float]:
    cfs = np.atleast_2d(np.asarray(cfs, dtype=float))
    if cfs.shape[0] < 2:
        return None
    return float(np.mean(pdist(cfs)))


def sign_test(ours: Sequence[float], theirs: Sequence[float]):
    """One-sided sign test that `ours` beats `theirs` pairwise; ties are dropped.

    Returns (wins, losses, p-value).
    """
    diff = np.asarray(ours, dtype=float) - np.asarray(theirs, dtype=float)
    wins = int(np.sum(diff > 0))
    losses = int(np.sum(diff < 0))
    if wins + losses == 0:
        return wins, losses, 1.0
    return wins, losses, float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)
