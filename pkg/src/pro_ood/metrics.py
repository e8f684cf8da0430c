"""Rank metrics for IND-vs-OOD separation. IND is the positive class."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


def _scores(values, name) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValidationError(f"{name} scores are empty", field=name)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} scores contain non-finite values", field=name)
    return arr


def auroc(ind_scores, ood_scores) -> float:
    """Mann-Whitney AUROC with average ranks for ties.

    Equals P(ind > ood) + 0.5 * P(ind == ood) over all IND/OOD pairs.
    """
    ind = _scores(ind_scores, "ind")
    ood = _scores(ood_scores, "ood")
    n_i, n_o = len(ind), len(ood)
    ranks = rankdata(np.concatenate([ind, ood]), method="average")
    u = float(np.sum(ranks[:n_i])) - n_i * (n_i + 1) / 2.0
    return u / (n_i * n_o)


def recall_rank(n_ind: int, q: float) -> int:
    """1-based rank ``ceil((1 - q) * n)`` of the IND score used as threshold."""
    if not 0 < q <= 1:
        raise ValidationError(f"q must lie in (0, 1], got {q}", field="q")
    # rounding guards against 1 - 0.95 = 0.050000000000000044
    return max(1, math.ceil(round((1.0 - q) * n_ind, 9)))


def fpr_at_tpr(ind_scores, ood_scores, q: float = 0.95) -> float:
    """False positive rate at the threshold keeping a fraction ``q`` of IND.

    The threshold is the ``ceil((1 - q) * n_ind)``-th smallest IND score and a
    sample is accepted as IND when its score is ``>=`` the threshold. No
    interpolation.
    """
    ind = np.sort(_scores(ind_scores, "ind"))
    ood = _scores(ood_scores, "ood")
    tau = ind[recall_rank(len(ind), q) - 1]
    return float(np.count_nonzero(ood >= tau)) / len(ood)


def threshold_at_tpr(ind_scores, q: float = 0.95) -> float:
    ind = np.sort(_scores(ind_scores, "ind"))
    return float(ind[recall_rank(len(ind), q) - 1])
