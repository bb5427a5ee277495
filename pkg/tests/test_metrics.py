import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cndbench.metrics import auc, aupr_in, der
from oracles import auc_pairs, aupr_thresholds, der_thresholds, random_score_sets

scores = st.lists(st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False), min_size=1, max_size=40)
tied = st.lists(st.integers(0, 4).map(float), min_size=1, max_size=40)
any_scores = st.one_of(scores, tied)


def test_auc_examples():
    assert auc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auc([0.8, 0.4], [0.6, 0.2]) == 0.75
    assert auc([0.3, 0.1, 0.3], [0.1, 0.3, 0.3]) == 0.5


def test_aupr_examples():
    assert aupr_in([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert aupr_in([0.8, 0.4], [0.6, 0.2]) == aupr_thresholds([0.8, 0.4], [0.6, 0.2])
    # threshold 0.8: P=1, R=.5 ; 0.6: P=.5 ; 0.4: P=2/3, R=1
    assert aupr_in([0.8, 0.4], [0.6, 0.2]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert aupr_in([1.0] * 3, [1.0] * 5) == 3 / 8


def test_der_examples():
    assert der([0.9, 0.8], [0.1, 0.2]) == 0.0
    assert der([0.5, 0.7], [0.5, 0.7]) == 0.5
    assert der([0.8, 0.4], [0.6, 0.2]) == 0.25


def test_empty_side_is_undefined():
    for f in (auc, aupr_in, der):
        assert math.isnan(f([], [1.0])) and math.isnan(f([1.0], []))


def test_randomized_sets_match_brute_force_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        pos, neg = random_score_sets(rng, 60)
        assert auc(pos, neg) == auc_pairs(pos, neg)
        assert aupr_in(pos, neg) == aupr_thresholds(pos, neg)
        assert der(pos, neg) == der_thresholds(pos, neg)


def test_rank_auc_exact_on_large_input():
    rng = np.random.default_rng(5)
    pos = np.round(rng.normal(0.3, 1, 10_000), 2)
    neg = np.round(rng.normal(0, 1, 10_000), 2)
    ps, ns = np.sort(pos), np.sort(neg)
    wins = 2 * np.searchsorted(ns, ps, side="left").sum() + (
        np.searchsorted(ns, ps, side="right") - np.searchsorted(ns, ps, side="left")).sum()
    assert auc(pos, neg) == int(wins) / (2 * 10_000 * 10_000)


@given(any_scores, any_scores)
def test_auc_antisymmetry(a, b):
    assert auc(a, b) + auc(b, a) == pytest.approx(1.0, abs=1e-15)


@given(any_scores, any_scores)
def test_ranges(a, b):
    assert 0.0 <= auc(a, b) <= 1.0
    assert 0.0 < aupr_in(a, b) <= 1.0
    assert 0.0 <= der(a, b) <= 0.5


@given(any_scores, any_scores)
def test_invariance_under_increasing_transform(a, b):
    f = lambda v: [math.atan(x / 100.0) * 7 + 3 for x in v]
    # atan may merge distinct inputs only if they round together; skip those
    if len(set(f(a + b))) != len(set(a + b)):
        return
    assert auc(f(a), f(b)) == auc(a, b)
    assert aupr_in(f(a), f(b)) == aupr_in(a, b)
    assert der(f(a), f(b)) == der(a, b)


@settings(max_examples=200)
@given(any_scores, any_scores)
def test_brute_force_equivalence(a, b):
    assert auc(a, b) == auc_pairs(a, b)
    assert aupr_in(a, b) == aupr_thresholds(a, b)
    assert der(a, b) == der_thresholds(a, b)


@given(any_scores)
def test_identical_multisets(a):
    assert auc(a, a) == 0.5
    assert der(a, a) == 0.5
    assert aupr_in([2.0] * len(a), [2.0] * 3) == len(a) / (len(a) + 3)
