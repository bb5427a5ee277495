import csv
import json
import re
from dataclasses import replace

import numpy as np
import pytest

from cndbench import harness
from cndbench.cli import main
from cndbench.config import ConfigError, ExperimentConfig, derive_seed, with_overrides
from cndbench.harness import RecordMismatch, run_experiment, sweep
from cndbench.report import load_records, write_leaderboard, write_report

TINY = {
    "sequence": {"num_stages": 3, "classes_per_stage": 3, "input_dim": 8, "train_per_class": 30,
                 "val_per_class": 8, "test_per_class": 15, "ood_per_class": 10},
    "trainer": {"max_epochs": 8, "early_stop_patience": 3},
    "model": {"hidden": [16], "feature_dim": 8},
    "scorers": ["softmax", "odin"],
    "seeds": 2,
}


def tiny(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**TINY, **kw})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return run_experiment(tiny(), out), out


# ---- configuration --------------------------------------------------------------

@pytest.mark.parametrize("raw, msg", [
    ({"scorers": ["b1"], "model": {"head_bias": True}}, "bias-free"),
    ({"method": "er"}, "shared_head"),
    ({"method": "ssil", "setting": "multi_head"}, "shared_head"),
    ({"colour": 1}, "unknown key"),
    ({"trainer": {"learning_rate": 0.1}}, "unknown key"),
    ({"scorers": ["nope"]}, "unknown scorers"),
    ({"scorers": ["softmax", "softmax"]}, "duplicate"),
    ({"seeds": 0}, "seeds"),
    ({"sequence": {"num_stages": 1}}, "num_stages"),
    ({"trainer": {"lr": -1}}, "lr"),
])
def test_invalid_configs_rejected(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_dict(raw)


def test_prototype_scorers_default_to_bias_free_head():
    assert ExperimentConfig.from_dict({"scorers": ["b2"]}).model.head_bias is False
    shared = ExperimentConfig.from_dict({"scorers": ["b1"], "setting": "shared_head"})
    assert shared.model.normalized_head and not shared.model.head_bias


def test_config_round_trip_and_hash():
    cfg = tiny()
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict() and again.hash() == cfg.hash()
    assert replace(cfg, output_dir="elsewhere", seeds=7).hash() == cfg.hash()
    assert with_overrides(cfg, {"trainer.lr": 0.01}).hash() != cfg.hash()
    with pytest.raises(ConfigError):
        with_overrides(cfg, {"trainer.nope": 1})


def test_seed_stream_is_prefix_stable():
    seeds = [derive_seed(0, i) for i in range(20)]
    assert len(set(seeds)) == 20 and all(0 <= s < 2 ** 64 for s in seeds)
    assert [derive_seed(0, i) for i in range(5)] == seeds[:5]
    assert derive_seed(1, 0) != seeds[0]


# ---- run / record -----------------------------------------------------------

def test_record_shape_and_partition_law(tiny_run):
    rec, out = tiny_run
    assert json.loads((out / "record.json").read_text()) == rec
    T = rec["config"]["sequence"]["num_stages"]
    for s in rec["seeds"]:
        assert s["status"] == "ok"
        stages = {m["stage"] for m in s["metric_rows"]}
        assert stages == set(range(1, T))
        for m in s["metric_rows"]:
            assert min(m["n_in"], m["n_out"]) > 0
            if m["stage"] == 1:
                assert m["n_forg"] == 0
        assert all(m["stage"] < T for m in s["metric_rows"])


def test_same_config_same_bytes(tiny_run, tmp_path):
    rec, out = tiny_run
    again = run_experiment(tiny(), tmp_path / "again")
    assert harness.dumps(again) == harness.dumps(rec)
    write_report([rec], tmp_path / "r1")
    write_report([again], tmp_path / "r2")
    assert (tmp_path / "r1/metrics.csv").read_bytes() == (tmp_path / "r2/metrics.csv").read_bytes()


def test_resume_matches_fresh_run(tiny_run, tmp_path):
    rec, _ = tiny_run
    partial = run_experiment(replace(tiny(), seeds=1), tmp_path)
    assert len(partial["seeds"]) == 1
    calls = []
    real = harness._safe_run_seed
    harness._safe_run_seed = lambda cfg, i: calls.append(i) or real(cfg, i)
    try:
        resumed = run_experiment(tiny(), tmp_path)
    finally:
        harness._safe_run_seed = real
    assert calls == [1]
    assert harness.dumps(resumed) == harness.dumps(rec)


def test_record_refuses_other_config(tiny_run):
    _, out = tiny_run
    with pytest.raises(RecordMismatch):
        run_experiment(tiny(method="mas"), out)


def test_failed_seed_recorded_and_others_continue(tmp_path, monkeypatch):
    real = harness.run_seed

    def flaky(cfg, i):
        if i == 0:
            raise FloatingPointError("boom")
        return real(cfg, i)

    monkeypatch.setattr(harness, "run_seed", flaky)
    rec = run_experiment(tiny(), tmp_path)
    assert [s["status"] for s in rec["seeds"]] == ["failed", "ok"]
    assert "boom" in rec["seeds"][0]["error"]
    assert rec["summary"]["cl"]["n_failed"] == 1


def test_parallel_jobs_match_serial(tiny_run, tmp_path):
    rec, _ = tiny_run
    assert harness.dumps(run_experiment(tiny(), tmp_path, jobs=2)) == harness.dumps(rec)


# ---- report ---------------------------------------------------------------

def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_report_tables(tiny_run, tmp_path):
    rec, out = tiny_run
    other = run_experiment(tiny(scorers=["softmax"], method="mas"), tmp_path / "mas")
    write_report([rec, other], tmp_path / "rep")
    summary = _csv(tmp_path / "rep/summary.csv")
    assert len(summary) == 2 + 1
    metrics = _csv(tmp_path / "rep/metrics.csv")
    assert len(metrics) == 2 * 2 * 2 + 2 * 2
    first = write_report(load_records([out, tmp_path / "mas"]), tmp_path / "again")
    for p in first:
        assert p.read_bytes() == (tmp_path / "rep" / p.relative_to(tmp_path / "again")).read_bytes()


def test_plot_values_equal_stage_means(tiny_run, tmp_path):
    rec, _ = tiny_run
    write_report([rec], tmp_path)
    means = _csv(tmp_path / "stage_means.csv")
    svg = (tmp_path / "plots" / f"finetune_multi_head_{rec['config_hash']}_p_auc.svg").read_text()
    pts = re.findall(r'data-series="(\w+)" data-x="(\d+)" data-y="([-\d.]+)"', svg)
    assert pts
    want = {(r["scorer"], r["stage"]): r["p_auc"] for r in means}
    for series, x, y in pts:
        assert want[(series, x)] == y


def test_missing_values_render_as_na(tmp_path):
    rec = run_experiment(tiny(scorers=["softmax"], seeds=1), tmp_path / "r")
    rec["seeds"][0]["metric_rows"][0]["p_auc"] = None
    write_report([rec], tmp_path / "rep")
    assert "NA" in (tmp_path / "rep/metrics.csv").read_text()


# ---- sweep ----------------------------------------------------------------

def test_sweep_of_one_point_equals_run(tiny_run, tmp_path):
    rec, _ = tiny_run
    records, board = sweep(tiny(), {"trainer.lr": [tiny().trainer.lr]}, tmp_path)
    assert harness.dumps(records[0]["seeds"]) == harness.dumps(rec["seeds"])
    assert records[0]["config_hash"] == rec["config_hash"]
    assert len(board) == 1


@pytest.mark.parametrize("key", ["cl", "nd"])
def test_leaderboard_sorted_and_best_is_max(tmp_path, key):
    base = tiny(scorers=["softmax"], seeds=1)
    records, board = sweep(base, {"trainer.lr": [0.005, 0.05, 0.2]}, tmp_path, key=key)
    scores = [harness.leaderboard_score(r, key) for r in records]
    assert [b["score"] for b in board] == sorted(scores, reverse=True)
    assert board[0]["score"] == max(scores)
    write_leaderboard(board, tmp_path / "lb.csv")
    rows = _csv(tmp_path / "lb.csv")
    assert [int(r["rank"]) for r in rows] == [1, 2, 3]
    assert float(rows[0]["score"]) == pytest.approx(max(scores), abs=5e-7)


# ---- CLI ------------------------------------------------------------------

def _write_cfg(path, **kw):
    path.write_text(json.dumps({**TINY, **kw}))
    return str(path)


def test_cli_exit_codes(tmp_path, capsys):
    good = _write_cfg(tmp_path / "good.json", scorers=["softmax"], seeds=1)
    bad = _write_cfg(tmp_path / "bad.json", scorers=["b1"], model={"head_bias": True})
    assert main(["validate-config", "--config", good]) == 0
    assert main(["validate-config", "--config", bad]) == 2
    assert main(["validate-config", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["generate-data", "--config", good, "--out", str(tmp_path / "d.csv")]) == 0
    assert main(["run", "--config", good, "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run/report/summary.csv").exists()
    other = _write_cfg(tmp_path / "other.json", scorers=["softmax"], seeds=1, method="mas")
    assert main(["run", "--config", other, "--out", str(tmp_path / "run")]) == 2
    assert main(["report", str(tmp_path / "run"), "--out", str(tmp_path / "rep")]) == 0
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "rep2")]) == 2
    (tmp_path / "grid.json").write_text(json.dumps({"trainer.lr": [0.05]}))
    assert main(["sweep", "--config", good, "--grid", str(tmp_path / "grid.json"),
                 "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw/leaderboard.csv").exists()


def test_cli_runtime_failure_exit_code(tmp_path, monkeypatch):
    good = _write_cfg(tmp_path / "good.json", scorers=["softmax"], seeds=1)
    monkeypatch.setattr(harness, "run_seed", lambda cfg, i: 1 / 0)
    assert main(["run", "--config", good, "--out", str(tmp_path / "run")]) == 3
