"""Acceptance criteria 1-12 at their stated tolerances.

Each test prints one ``[ACCEPTANCE n] PASS|FAIL`` line (visible under ``pytest -v``)
before asserting.  The directional criteria share cached 10-seed runs.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from cndbench import harness
from cndbench import tensor as T
from cndbench.cl import ReplayBuffer, TrainerConfig, train_stage_er, train_stage_finetune
from cndbench.config import ExperimentConfig, derive_seed
from cndbench.datasets import SequenceSpec, generate_sequence
from cndbench.eval import ScoredPartition
from cndbench.harness import run_experiment
from cndbench.metrics import auc, aupr_in, der
from cndbench.models import Model, ModelConfig
from cndbench.report import write_report
from cndbench.scorers import ScorerContext, score_odin, score_softmax
from conftest import central_difference, rel_err
from oracles import auc_pairs, aupr_thresholds, der_thresholds, random_score_sets
from test_tensor import _ops, fd_grads, taped_grad

SEEDS = 10

CONFIGS = {
    "finetune": {"method": "finetune", "scorers": ["softmax"]},
    "mas": {"method": "mas", "scorers": ["softmax"]},
    "lwf": {"method": "lwf", "scorers": ["softmax"]},
    "er25": {"method": "er", "setting": "shared_head", "scorers": ["softmax"], "trainer": {"buffer_per_class": 25}},
    "er50": {"method": "er", "setting": "shared_head", "scorers": ["softmax"], "trainer": {"buffer_per_class": 50}},
    "prototype": {"method": "finetune", "scorers": ["softmax", "b1", "b2"]},
    "disjoint": {"method": "finetune", "scorers": ["softmax"], "sequence": {"regime": "disjoint_domain"}},
}


def verdict(n: int, ok: bool, detail: str, capsys) -> None:
    with capsys.disabled():
        print(f"\n[ACCEPTANCE {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


class Runs:
    """Lazily computed 10-seed records, with wall-clock time per config."""

    def __init__(self):
        self.records, self.seconds = {}, {}

    def __getitem__(self, name):
        if name not in self.records:
            cfg = ExperimentConfig.from_dict({**CONFIGS[name], "seeds": SEEDS})
            t0 = time.perf_counter()
            self.records[name] = run_experiment(cfg, write=False)
            self.seconds[name] = time.perf_counter() - t0
        return self.records[name]


@pytest.fixture(scope="session")
def runs():
    return Runs()


def per_seed(rec, key, stage=None, scorer="softmax"):
    """One value per seed: ``key`` at ``stage`` (default: last evaluated stage)."""
    out = []
    for s in rec["seeds"]:
        rows = [m for m in s["metric_rows"] if m["scorer"] == scorer]
        row = max(rows, key=lambda m: m["stage"]) if stage is None else next(m for m in rows if m["stage"] == stage)
        out.append(math.nan if row[key] is None else row[key])
    return np.array(out)


def mauc(rec, scorer):
    """Per-seed mean over evaluation stages of the combined In-vs-(Forg+Out) AUC."""
    return np.array([np.mean([m["c_auc"] for m in s["metric_rows"] if m["scorer"] == scorer]) for s in rec["seeds"]])


# ---------------------------------------------------------------------------

def test_01_metric_oracles(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        pos, neg = random_score_sets(rng, 200)
        mismatches += auc(pos, neg) != auc_pairs(pos, neg)
        mismatches += aupr_in(pos, neg) != aupr_thresholds(pos, neg)
        mismatches += der(pos, neg) != der_thresholds(pos, neg)
    # the budget covers the library calls; the brute-force oracles are timed separately
    lib = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        pos, neg = random_score_sets(rng, 200)
        auc(pos, neg), aupr_in(pos, neg), der(pos, neg)
    lib = time.perf_counter() - lib
    total = time.perf_counter() - t0
    verdict(1, mismatches == 0 and lib < 10.0,
            f"1000 sets, {mismatches} mismatches, metrics {lib:.2f}s (with oracles {total:.2f}s) < 10s", capsys)


def test_02_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst, cases = 0.0, 0
    for _ in range(3):
        for _name, build, arrays in _ops(rng):
            for g, w in zip(taped_grad(build, *arrays), fd_grads(build, *arrays)):
                worst = max(worst, rel_err(g, w))
            cases += 1
    for i in range(10):
        x, w, y = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.integers(0, 4, size=3)
        fn = lambda v: T.cross_entropy(T.matmul(T.relu(v), T.Tensor(w)), y)
        x = x + np.sign(x) * 0.05  # keep away from the ReLU kink
        worst = max(worst, rel_err(T.grad_wrt_input(fn, x), central_difference(lambda v: fn(T.Tensor(v)).item(), x)))
        cases += 1
    dt = time.perf_counter() - t0
    verdict(2, cases >= 50 and worst < 1e-4 and dt < 30.0,
            f"{cases} cases, max rel err {worst:.2e} < 1e-4, {dt:.2f}s < 30s", capsys)


def test_03_reductions(capsys):
    base = {**CONFIGS["finetune"], "seeds": 2}
    ft = run_experiment(ExperimentConfig.from_dict(base), write=False)
    checks = {}
    for method, key in (("mas", "mas_lambda"), ("lwf", "lwf_lambda")):
        rec = run_experiment(ExperimentConfig.from_dict({**base, "method": method, "trainer": {key: 0.0}}),
                             write=False)
        checks[f"{method}(0)==finetune"] = all(
            harness.dumps([a["accuracy"], a["metric_rows"]]) == harness.dumps([b["accuracy"], b["metric_rows"]])
            for a, b in zip(rec["seeds"], ft["seeds"]))

    seq = generate_sequence(SequenceSpec(seed=derive_seed(0, 0)))
    stage = seq.stages[0]
    tcfg = TrainerConfig(seed=5)
    models = []
    for train in (lambda m: train_stage_finetune(m, stage, tcfg), lambda m: train_stage_er(m, stage, ReplayBuffer(25), tcfg)):
        m = Model(ModelConfig(input_dim=seq.input_dim), "shared_head", seed=11)
        m.add_head(stage.class_ids)
        train(m)
        models.append(m.state_dict())
    checks["er stage 1==finetune"] = all(models[0][k].tobytes() == models[1][k].tobytes() for k in models[0])

    m = Model(ModelConfig(input_dim=seq.input_dim), "multi_head", seed=11)
    m.add_head(stage.class_ids)
    train_stage_finetune(m, stage, tcfg)
    snap, x = m.snapshot(1), seq.all_test()[0].x
    ctx = ScorerContext()
    checks["odin(0,1)==softmax"] = (score_odin(snap, x, ctx, epsilon=0.0, temperature=1.0).tobytes()
                                    == score_softmax(snap, x, ctx).tobytes())
    verdict(3, all(checks.values()), ", ".join(f"{k}: {v}" for k, v in checks.items()), capsys)


def test_04_partition_law(runs, capsys, monkeypatch):
    # independent disjointness check on every scored partition of a fresh run
    overlaps, checked = [], [0]

    def check(self):
        ids = [{i for i, _ in s} for s in (self.in_set, self.forg_set, self.out_set)]
        checked[0] += 1
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            overlaps.append(self.t)

    monkeypatch.setattr(ScoredPartition, "check_disjoint", check)
    fresh = run_experiment(ExperimentConfig.from_dict({**CONFIGS["er25"], "seeds": 2}), write=False)
    monkeypatch.undo()

    problems = []
    for name, rec in [*((n, runs[n]) for n in CONFIGS), ("er25-checked", fresh)]:
        seq = rec["config"]["sequence"]
        n_stages, per_stage = seq["num_stages"], seq["classes_per_stage"] * seq["test_per_class"]
        for s in rec["seeds"]:
            if s["status"] != "ok":
                problems.append(f"{name} seed {s['seed_index']} failed")
                continue
            for m in s["metric_rows"]:
                t = m["stage"]
                if t >= n_stages:
                    problems.append(f"{name}: Out evaluated at final stage")
                if t == 1 and m["n_forg"] != 0:
                    problems.append(f"{name}: Forg_1 not empty")
                if m["n_out"] != (n_stages - t) * per_stage:
                    problems.append(f"{name}: Out size at {t}")
                if m["n_in"] + m["n_forg"] + m["n_residual"] != t * per_stage:
                    problems.append(f"{name}: seen samples not covered at {t}")
    ok = not problems and not overlaps and checked[0] > 0
    verdict(4, ok, f"{checked[0]} partitions re-checked, {len(overlaps)} overlaps, "
                   f"{len(problems)} count violations {problems[:3]}", capsys)


def test_05_forgetting(runs, capsys):
    f = {n: runs[n]["summary"]["cl"]["avg_forgetting_mean"] for n in ("finetune", "mas", "lwf")}
    slowest = max(runs.seconds[n] for n in ("finetune", "mas", "lwf"))
    ok = f["finetune"] - f["mas"] >= 0.10 and f["finetune"] - f["lwf"] >= 0.10 and slowest < 300
    verdict(5, ok, f"forgetting FT {100 * f['finetune']:.2f} MAS {100 * f['mas']:.2f} LwF {100 * f['lwf']:.2f} "
                   f"points (need gap >= 10); slowest 10-seed run {slowest:.1f}s < 300s", capsys)


def test_06_nd_degrades_along_sequence(runs, capsys):
    rec = runs["finetune"]
    p2, last = np.nanmean(per_seed(rec, "p_auc", 2)), np.nanmean(per_seed(rec, "p_auc"))
    verdict(6, p2 - last >= 0.03, f"softmax P.AUC stage 2 {p2:.4f}, final {last:.4f}, drop {100 * (p2 - last):.2f} "
                                  f"points (need >= 3)", capsys)


def test_07_cl_helps_previous_stage_nd(runs, capsys):
    mas, ft = per_seed(runs["mas"], "p_auc"), per_seed(runs["finetune"], "p_auc")
    wins = int(np.sum(mas > ft))
    ok = np.nanmean(mas) > np.nanmean(ft) and wins >= 9
    verdict(7, ok, f"final P.AUC MAS {np.nanmean(mas):.4f} vs FT {np.nanmean(ft):.4f}, MAS wins {wins}/10 "
                   f"(need >= 9)", capsys)


def test_08_buffer_size(runs, capsys):
    e50, e25 = np.nanmean(per_seed(runs["er50"], "p_auc")), np.nanmean(per_seed(runs["er25"], "p_auc"))
    verdict(8, e50 >= e25, f"final P.AUC ER50 {e50:.4f} vs ER25 {e25:.4f}", capsys)


def test_09_prototype_scorers(runs, capsys):
    rec = runs["prototype"]
    sm, b1, b2 = (float(np.mean(mauc(rec, s))) for s in ("softmax", "b1", "b2"))
    ok = b2 >= sm - 0.005 and b2 >= b1 - 0.005
    verdict(9, ok, f"mAUC softmax {sm:.4f} b1 {b1:.4f} b2 {b2:.4f} (need b2 >= softmax - 0.005 "
                   f"and b2 >= b1 - 0.005)", capsys)


def test_10_feature_norm(runs, capsys):
    wins = 0
    for s in runs["finetune"]["seeds"]:
        g = {r["group"]: r["mean_norm"] for r in s["feature_stats"] if r["stage"] == 1}
        wins += g["in"] > g["out"]
    verdict(10, wins >= 9, f"stage-1 mean ||phi|| In > Out in {wins}/10 seeds (need >= 9)", capsys)


def test_11_forg_out_hardness(runs, capsys):
    same = np.nanmean(per_seed(runs["finetune"], "forg_out_der"))
    dis = np.nanmean(per_seed(runs["disjoint"], "forg_out_der"))
    verdict(11, dis <= same - 0.10, f"final Forg-vs-Out DER same-domain {same:.4f}, disjoint {dis:.4f}, "
                                    f"gap {100 * (same - dis):.2f} points (need >= 10)", capsys)


def test_12_determinism(tmp_path, capsys):
    cfg = ExperimentConfig.from_dict({**CONFIGS["prototype"], "seeds": 1})
    blobs = []
    for name in ("a", "b"):
        rec = run_experiment(replace(cfg, output_dir=str(tmp_path / name)))
        write_report([rec], tmp_path / name / "report")
        blobs.append((tmp_path / name / "report" / "metrics.csv").read_bytes())
    verdict(12, blobs[0] == blobs[1] and len(blobs[0]) > 0,
            f"two runs, metrics.csv {len(blobs[0])} bytes, identical: {blobs[0] == blobs[1]}", capsys)
