"""In / Forg / Out partitions and stage-aware aggregation.

Stages are numbered ``1..T`` here, matching the per-stage reports.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .metrics import UNDEFINED, auc, aupr_in, der

UNSEEN, WRONG, CORRECT = -1, 0, 1


class HistoryError(RuntimeError):
    pass


class CorrectnessHistory:
    """``H[t][i]``: correctness of test sample ``i`` under model ``M_t``.

    Rows are appended one stage at a time and never rewritten.
    """

    def __init__(self, stage_of: np.ndarray, num_stages: int):
        self.stage_of = np.asarray(stage_of, dtype=np.int64)
        self.num_stages = num_stages
        self.matrix = np.full((num_stages, self.stage_of.size), UNSEEN, dtype=np.int8)
        self.completed = 0

    def record(self, t: int, correct: np.ndarray) -> None:
        """Store correctness for every sample of stages ``<= t`` (others ignored)."""
        if t != self.completed + 1:
            raise HistoryError(f"expected stage {self.completed + 1}, got {t}")
        seen = self.stage_of <= t
        correct = np.asarray(correct, dtype=bool)
        row = np.full(self.stage_of.size, UNSEEN, dtype=np.int8)
        row[seen] = np.where(correct[seen], CORRECT, WRONG)
        self.matrix[t - 1] = row
        self.completed = t

    def at(self, t: int) -> np.ndarray:
        return self.matrix[t - 1]


@dataclass
class Partition:
    t: int
    in_idx: np.ndarray
    forg_idx: np.ndarray
    out_idx: np.ndarray
    residual_idx: np.ndarray


def partition_sets(history: CorrectnessHistory, t: int) -> Partition:
    """Split test samples into In_t, Forg_t, Out_t (+ never-correct residual).

    In_t = seen and correct under M_t; Out_t = stage > t;
    Forg_t = stage k < t, wrong under M_t, correct under M_k.
    """
    if t < 1 or t > history.completed:
        raise HistoryError(f"history covers stages 1..{history.completed}, asked for {t}")
    stage = history.stage_of
    now = history.at(t)
    seen = stage <= t
    in_mask = seen & (now == CORRECT)
    out_mask = ~seen
    own = np.full(stage.size, UNSEEN, dtype=np.int8)
    for k in range(1, t):
        sel = stage == k
        own[sel] = history.at(k)[sel]
    forg_mask = (stage < t) & (now == WRONG) & (own == CORRECT)
    residual = seen & ~in_mask & ~forg_mask
    return Partition(t, *(np.flatnonzero(m) for m in (in_mask, forg_mask, out_mask, residual)))


@dataclass
class ScoredPartition:
    """Scores for the three sets at stage ``t`` under one scorer."""

    t: int
    scorer: str
    setting: str
    in_set: list  # (sample_id, score)
    forg_set: list
    out_set: list
    in_stage: list  # stage of each In sample, aligned with in_set
    n_residual: int = 0

    @classmethod
    def build(cls, part: Partition, scores: np.ndarray, sample_ids: np.ndarray, stage_of: np.ndarray,
              scorer: str, setting: str) -> "ScoredPartition":
        def pairs(idx):
            return [(int(sample_ids[i]), float(scores[i])) for i in idx]

        return cls(part.t, scorer, setting, pairs(part.in_idx), pairs(part.forg_idx), pairs(part.out_idx),
                   [int(stage_of[i]) for i in part.in_idx], int(part.residual_idx.size))

    def check_disjoint(self) -> None:
        a, b, c = ({i for i, _ in s} for s in (self.in_set, self.forg_set, self.out_set))
        if a & b or a & c or b & c:
            raise HistoryError(f"stage {self.t}: In/Forg/Out overlap")


@dataclass
class MetricRow:
    seed: int
    stage: int
    scorer: str
    c_auc: float
    r_auc: float
    p_auc: float
    c_aupr_in: float
    r_aupr_in: float
    p_aupr_in: float
    c_der: float
    r_der: float
    p_der: float
    in_forg_auc: float
    in_forg_aupr_in: float
    in_forg_der: float
    forg_out_auc: float
    forg_out_aupr_in: float
    forg_out_der: float
    n_in: int
    n_forg: int
    n_out: int
    n_residual: int
    calib_auc: float = UNDEFINED

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def _triple(pos, neg):
    return auc(pos, neg), aupr_in(pos, neg), der(pos, neg)


def stage_metrics(part: ScoredPartition, seed: int = 0, calib_auc: float = UNDEFINED) -> MetricRow:
    """C/R/P variants of AUC, AUPR-IN and DER plus the Forg comparisons.

    C pools every In sample, R keeps In of stage ``t``, P keeps stages ``< t``.
    """
    ins = np.array([s for _, s in part.in_set])
    in_stage = np.array(part.in_stage, dtype=np.int64)
    forg = np.array([s for _, s in part.forg_set])
    out = np.array([s for _, s in part.out_set])
    recent = ins[in_stage == part.t] if ins.size else ins
    prev = ins[in_stage < part.t] if ins.size else ins
    c, r, p = _triple(ins, out), _triple(recent, out), _triple(prev, out)
    i_f, f_o = _triple(ins, forg), _triple(forg, out)
    return MetricRow(
        seed=seed, stage=part.t, scorer=part.scorer,
        c_auc=c[0], r_auc=r[0], p_auc=p[0],
        c_aupr_in=c[1], r_aupr_in=r[1], p_aupr_in=p[1],
        c_der=c[2], r_der=r[2], p_der=p[2],
        in_forg_auc=i_f[0], in_forg_aupr_in=i_f[1], in_forg_der=i_f[2],
        forg_out_auc=f_o[0], forg_out_aupr_in=f_o[1], forg_out_der=f_o[2],
        n_in=int(ins.size), n_forg=int(forg.size), n_out=int(out.size), n_residual=part.n_residual,
        calib_auc=calib_auc,
    )


def nanmean(values) -> float:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else UNDEFINED


def average_accuracy(acc: np.ndarray) -> float:
    """Mean final accuracy over stages; ``acc[t, k]`` = accuracy on stage k after stage t."""
    return nanmean(acc[-1].tolist())


def average_forgetting(acc: np.ndarray) -> float:
    """Mean over k < T of (best earlier accuracy on k) - (final accuracy on k)."""
    n = acc.shape[0]
    if n < 2:
        return 0.0
    drops = [float(np.nanmax(acc[k : n - 1, k]) - acc[n - 1, k]) for k in range(n - 1)]
    return nanmean(drops)


@dataclass
class SummaryRow:
    scorer: str
    m_c_auc: float
    m_r_auc: float
    m_p_auc: float
    m_c_aupr_in: float
    m_c_der: float
    m_in_forg_der: float
    m_forg_out_der: float
    final_p_auc: float
    cl_avg_accuracy: float
    avg_forgetting: float
    stages_evaluated: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def sequence_summary(rows: Sequence[MetricRow], acc: np.ndarray, scorer: Optional[str] = None) -> SummaryRow:
    """Means over evaluation stages; undefined markers are skipped."""
    if scorer is not None:
        rows = [r for r in rows if r.scorer == scorer]
    rows = sorted(rows, key=lambda r: r.stage)
    name = scorer if scorer is not None else (rows[0].scorer if rows else "")
    return SummaryRow(
        scorer=name,
        m_c_auc=nanmean(r.c_auc for r in rows),
        m_r_auc=nanmean(r.r_auc for r in rows),
        m_p_auc=nanmean(r.p_auc for r in rows),
        m_c_aupr_in=nanmean(r.c_aupr_in for r in rows),
        m_c_der=nanmean(r.c_der for r in rows),
        m_in_forg_der=nanmean(r.in_forg_der for r in rows),
        m_forg_out_der=nanmean(r.forg_out_der for r in rows),
        final_p_auc=rows[-1].p_auc if rows else UNDEFINED,
        cl_avg_accuracy=average_accuracy(acc),
        avg_forgetting=average_forgetting(acc),
        stages_evaluated=len(rows),
    )


@dataclass
class FeatureStatRow:
    seed: int
    stage: int
    group: str
    n: int
    mean_norm: float
    mean: float
    std: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def feature_group_stats(feats: np.ndarray) -> tuple[float, float, float]:
    """(mean L2 norm, mean of per-sample feature means, mean of per-sample feature stds)."""
    feats = np.asarray(feats, dtype=np.float64)
    return (float(np.linalg.norm(feats, axis=1).mean()), float(feats.mean(axis=1).mean()),
            float(feats.std(axis=1).mean()))


def feature_stats(features: np.ndarray, part: Partition, stage_of: np.ndarray, seed: int = 0) -> list[FeatureStatRow]:
    """Feature statistics per set at stage ``part.t``; empty groups are omitted.

    Groups: all In, first In (stage 1), previous In (stages 2..t-1), last In
    (stage t), Forg and Out.
    """
    t = part.t
    st_in = stage_of[part.in_idx]
    groups = {
        "in": part.in_idx,
        "first_in": part.in_idx[st_in == 1],
        "prev_in": part.in_idx[(st_in > 1) & (st_in < t)],
        "last_in": part.in_idx[st_in == t],
        "forg": part.forg_idx,
        "out": part.out_idx,
    }
    rows = []
    for name, idx in groups.items():
        if idx.size == 0:
            continue
        norm, mean, std = feature_group_stats(features[idx])
        rows.append(FeatureStatRow(seed, t, name, int(idx.size), norm, mean, std))
    return rows
