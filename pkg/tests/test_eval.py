import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cndbench.eval import (CorrectnessHistory, HistoryError, MetricRow, ScoredPartition, average_accuracy,
                           average_forgetting, feature_group_stats, feature_stats, partition_sets, sequence_summary,
                           stage_metrics)
from cndbench.metrics import auc, aupr_in, der


def history(stage_of, rows):
    h = CorrectnessHistory(np.array(stage_of), len(rows))
    for t, correct in enumerate(rows, start=1):
        h.record(t, np.array(correct, dtype=bool))
    return h


def test_stage_one_has_no_forg():
    h = history([1, 1, 2, 3], [[1, 0, 0, 0]])
    p = partition_sets(h, 1)
    assert list(p.in_idx) == [0] and p.forg_idx.size == 0 and list(p.out_idx) == [2, 3]
    assert list(p.residual_idx) == [1]


def test_forgotten_and_never_correct_samples():
    # sample 0: stage 1, right at 1, wrong at 3 -> Forg_3
    # sample 1: stage 2, wrong at 2 and at 3 -> residual
    h = history([1, 2, 3, 4], [[1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 1, 0]])
    p = partition_sets(h, 3)
    assert list(p.forg_idx) == [0]
    assert list(p.in_idx) == [2]
    assert list(p.out_idx) == [3]
    assert list(p.residual_idx) == [1]


def test_history_is_append_only_and_complete():
    h = CorrectnessHistory(np.array([1, 2]), 2)
    with pytest.raises(HistoryError):
        h.record(2, np.array([True, True]))
    h.record(1, np.array([True, True]))
    assert h.at(1)[1] == -1  # not yet seen
    with pytest.raises(HistoryError):
        partition_sets(h, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(1, 40), st.integers(0, 10_000))
def test_partition_law(T, n, seed):
    rng = np.random.default_rng(seed)
    stage_of = rng.integers(1, T + 1, size=n)
    h = history(stage_of, [rng.random(n) < 0.6 for _ in range(T)])
    for t in range(1, T + 1):
        p = partition_sets(h, t)
        sets = [set(p.in_idx), set(p.forg_idx), set(p.out_idx), set(p.residual_idx)]
        for i in range(4):
            for j in range(i):
                assert not sets[i] & sets[j]
        assert set().union(*sets) == set(range(n))
        assert all(stage_of[i] <= t for i in sets[0] | sets[1])
        assert all(stage_of[i] > t for i in sets[2])
        if t == 1:
            assert not sets[1]


def test_scored_partition_overlap_detected():
    sp = ScoredPartition(2, "softmax", "multi_head", [(1, 0.5)], [(1, 0.2)], [(3, 0.1)], [1])
    with pytest.raises(HistoryError):
        sp.check_disjoint()


def _scored(t, ins, in_stage, forg, out):
    return ScoredPartition(t, "s", "multi_head", [(i, s) for i, s in enumerate(ins)],
                           [(100 + i, s) for i, s in enumerate(forg)], [(200 + i, s) for i, s in enumerate(out)],
                           in_stage)


def test_stage_metrics_definitions():
    ins, st_ = [0.9, 0.8, 0.4, 0.7], [1, 2, 2, 1]
    forg, out = [0.5, 0.3], [0.6, 0.2, 0.1]
    row = stage_metrics(_scored(2, ins, st_, forg, out))
    assert row.c_auc == auc(ins, out)
    assert row.r_auc == auc([0.8, 0.4], out)
    assert row.p_auc == auc([0.9, 0.7], out)
    assert row.in_forg_der == der(ins, forg)
    assert row.forg_out_aupr_in == aupr_in(forg, out)
    assert (row.n_in, row.n_forg, row.n_out) == (4, 2, 3)


def test_stage_one_metrics():
    row = stage_metrics(_scored(1, [0.9, 0.2], [1, 1], [], [0.5]))
    assert row.r_auc == row.c_auc
    assert math.isnan(row.p_auc)
    assert math.isnan(row.in_forg_auc) and math.isnan(row.forg_out_der)


def test_summary_hand_computed():
    rows = [MetricRow(0, 1, "s", 0.8, 0.8, math.nan, *[0.0] * 16, calib_auc=0.5),
            MetricRow(0, 2, "s", 0.6, 0.7, 0.5, *[0.0] * 16, calib_auc=0.5)]
    acc = np.array([[0.9, np.nan, np.nan], [0.7, 0.8, np.nan], [0.5, 0.6, 1.0]])
    s = sequence_summary(rows, acc, "s")
    assert s.m_c_auc == pytest.approx((0.8 + 0.6) / 2)
    assert s.m_r_auc == pytest.approx(0.75)
    assert s.m_p_auc == 0.5  # undefined stage skipped
    assert s.final_p_auc == 0.5
    assert s.cl_avg_accuracy == pytest.approx((0.5 + 0.6 + 1.0) / 3)
    assert s.avg_forgetting == pytest.approx(((0.9 - 0.5) + (0.8 - 0.6)) / 2)
    assert s.stages_evaluated == 2


def test_single_stage_forgetting_zero():
    assert average_forgetting(np.array([[0.9]])) == 0.0
    assert average_accuracy(np.array([[0.9]])) == 0.9


def test_feature_stats_invariances():
    f = np.random.default_rng(0).normal(size=(6, 4))
    assert feature_group_stats(np.vstack([f, f])) == pytest.approx(feature_group_stats(f), rel=1e-12)
    assert feature_group_stats(np.zeros((3, 4))) == (0.0, 0.0, 0.0)


def test_feature_stats_groups():
    h = history([1, 2, 3, 1, 4], [[1, 0, 0, 1, 0], [1, 1, 0, 1, 0], [0, 1, 1, 1, 0]])
    p = partition_sets(h, 3)
    feats = np.arange(20, dtype=float).reshape(5, 4)
    rows = {r.group: r for r in feature_stats(feats, p, np.array([1, 2, 3, 1, 4]))}
    assert set(rows) == {"in", "first_in", "prev_in", "last_in", "forg", "out"}
    assert rows["forg"].n == 1 and rows["first_in"].n == 1 and rows["out"].n == 1
    assert rows["out"].mean_norm == pytest.approx(np.linalg.norm(feats[4]))
