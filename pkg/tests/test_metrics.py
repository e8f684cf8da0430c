import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pro_ood.errors import ValidationError
from pro_ood.metrics import auroc, fpr_at_tpr, recall_rank, threshold_at_tpr
from pro_ood.rng import philox

from oracles import auroc_pairs, fpr_scan


def test_auroc_examples():
    assert auroc([3, 4, 5], [0, 1, 2]) == 1.0
    assert auroc([0, 1], [0, 1]) == 0.5
    assert auroc([1, 2, 2], [0, 2]) == 4 / 6


def test_fpr_examples():
    assert fpr_at_tpr([3, 4, 5], [0, 1, 2]) == 0.0
    ind = np.arange(1, 101, dtype=float)
    assert threshold_at_tpr(ind) == 5.0
    assert fpr_at_tpr(ind, [0.5, 5.5, 200]) == 2 / 3


def test_fpr_identical_sets_equals_tpr_at_threshold():
    s = philox(1, 0).normal(size=137)
    tau = threshold_at_tpr(s)
    tpr = np.mean(s >= tau)
    assert tpr >= 0.95
    assert fpr_at_tpr(s, s.copy()) == tpr


def test_recall_rank_guards_float_rounding():
    # (1 - 0.95) * 100 is 5.000000000000004 in floating point
    assert recall_rank(100, 0.95) == 5
    assert recall_rank(20, 0.95) == 1
    assert recall_rank(7, 0.95) == 1
    assert recall_rank(1000, 0.95) == 50


@pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [np.inf]])
def test_invalid_scores_rejected(bad):
    with pytest.raises(ValidationError):
        auroc(bad, [1.0])
    with pytest.raises(ValidationError):
        fpr_at_tpr([1.0, 2.0], bad)


def test_invalid_q():
    with pytest.raises(ValidationError):
        fpr_at_tpr([1.0], [1.0], q=0.0)


def _random_sets(seed):
    rng = philox(seed, 0)
    n_i, n_o = int(rng.integers(1, 201)), int(rng.integers(1, 201))
    if seed % 2:
        # heavy ties
        return rng.integers(0, 6, n_i).astype(float), rng.integers(0, 6, n_o).astype(float)
    return rng.normal(size=n_i), rng.normal(0.3, 1.0, size=n_o)


@pytest.mark.parametrize("seed", range(25))
def test_metrics_match_brute_force(seed):
    ind, ood = _random_sets(seed)
    assert auroc(ind, ood) == auroc_pairs(ind, ood)
    assert fpr_at_tpr(ind, ood) == fpr_scan(ind, ood)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.integers(-5, 5), min_size=1, max_size=40),
    st.lists(st.integers(-5, 5), min_size=1, max_size=40),
)
def test_auroc_symmetry_and_oracle(a, b):
    a, b = np.array(a, float), np.array(b, float)
    assert auroc(a, b) == auroc_pairs(a, b)
    assert auroc(a, b) + auroc(b, a) == 1.0
    assert fpr_at_tpr(a, b) == fpr_scan(a, b)


def test_auroc_invariant_to_increasing_transforms():
    rng = philox(4, 0)
    a, b = rng.normal(size=150), rng.normal(0.5, 1, size=120)
    base = auroc(a, b)
    assert auroc(np.exp(a), np.exp(b)) == base
    assert auroc(3 * a - 7, 3 * b - 7) == base
