"""Experiment orchestration: per-seed stage loop, aggregation, resume, sweeps."""
from __future__ import annotations

import itertools
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cl
from .config import ConfigError, ExperimentConfig, derive_seed, with_overrides
from .datasets import Sequence, generate_sequence, import_dataset
from .eval import (CorrectnessHistory, MetricRow, ScoredPartition, average_forgetting, feature_stats, nanmean,
                   partition_sets, sequence_summary, stage_metrics)
from .models import Model, Setting
from .scorers import ScorerContext, calibrate, combined_scores, fit_mahalanobis, vae_input
from .vae import VAE, VAEConfig

log = logging.getLogger(__name__)

RECORD_FILE = "record.json"


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=1)


def load_sequence(cfg: ExperimentConfig, seed: int) -> Sequence:
    if cfg.data_path:
        return import_dataset(cfg.data_path, seed=seed)
    return generate_sequence(replace(cfg.sequence, seed=seed))


def _train_stage(method, model, stage, state, tcfg, stage_classes):
    if method == "finetune":
        _, rep = cl.train_stage_finetune(model, stage, tcfg)
    elif method == "mas":
        _, state["mas"], rep = cl.train_stage_mas(model, stage, state.get("mas"), tcfg)
    elif method == "lwf":
        _, rep = cl.train_stage_lwf(model, stage, state.get("prev"), tcfg)
    elif method == "er":
        _, rep = cl.train_stage_er(model, stage, state.get("buffer"), tcfg)
    elif method == "ssil":
        _, rep = cl.train_stage_ssil(model, stage, state.get("buffer"), state.get("prev"), tcfg, stage_classes)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return rep


def run_seed(cfg: ExperimentConfig, seed_index: int) -> dict:
    """Run the full stage loop for one seed and return its record."""
    seed = derive_seed(cfg.master_seed, seed_index)
    seq = load_sequence(cfg, seed)
    n_stages = seq.num_stages
    multi = Setting(cfg.setting) is Setting.MULTI_HEAD
    model = Model(replace(cfg.model, input_dim=seq.input_dim), cfg.setting, seed=[seed, 1])
    tcfg = replace(cfg.trainer, seed=seed)
    opts = cfg.scorer_options
    test, stage0 = seq.all_test()
    stage_of = stage0 + 1
    history = CorrectnessHistory(stage_of, n_stages)
    acc = np.full((n_stages, n_stages), np.nan)
    state: dict = {}
    if cfg.method in ("er", "ssil"):
        state["buffer"] = cl.ReplayBuffer(cfg.trainer.buffer_per_class, seed=seed)
    ctx = ScorerContext(b2_n=opts.b2_n, vae_input=opts.vae_input, vae_samples=opts.vae_samples, vae_seed=seed % (2**32))
    vae = None
    if "vae" in cfg.scorers:
        dim = seq.input_dim if opts.vae_input == "raw" else cfg.model.feature_dim
        vae = VAE(dim, VAEConfig(epochs=opts.vae_epochs, seed=seed % (2**32)))
    stage_reports, metric_rows, feat_rows, calib = [], [], [], []
    stage_classes = [s.class_ids for s in seq.stages]

    for stage in seq.stages:
        k, t = stage.index, stage.index + 1
        model.add_head(stage.class_ids)
        rep = _train_stage(cfg.method, model, stage, state, tcfg, stage_classes)
        snap = model.snapshot(t)

        correct = np.zeros(len(test), dtype=bool)
        for j in range(t):
            idx = np.flatnonzero(stage0 == j)
            pred = snap.predict(test.x[idx], j if multi else 0)
            correct[idx] = pred == test.y[idx]
            acc[k, j] = float(correct[idx].mean())
        history.record(t, correct)
        rep.test_accuracy = {j + 1: acc[k, j] for j in range(t)}
        rep.forgetting = {j + 1: float(np.max(acc[j:k, j]) - acc[k, j]) for j in range(k)}
        stage_reports.append(rep.to_dict())

        if "mahalanobis" in cfg.scorers:
            ctx = replace(ctx, mahalanobis=fit_mahalanobis(snap, stage.train.x, stage.train.y, ctx.mahalanobis,
                                                           ridge=opts.mahalanobis_ridge))
        if vae is not None:
            vae.fit(vae_input(snap, stage.train.x, opts.vae_input))
            ctx = replace(ctx, vae=vae)

        # novelty detection is evaluated only while an Out set exists
        if t < n_stages and cfg.scorers:
            in_x, in_heads = stage.train.x, np.full(len(stage.train), k if multi else 0)
            if "buffer" in state and len(state["buffer"]):
                buf, _ = state["buffer"].as_split(seq.input_dim)
                in_x = np.concatenate([in_x, buf.x])
                in_heads = np.concatenate([in_heads, np.zeros(len(buf), dtype=np.int64)])
            ctx = calibrate(cfg.scorers, snap, in_x, in_heads, seq.ood_calibration.x, ctx)
            calib.append({"stage": t, "odin_epsilon": ctx.odin_epsilon, "odin_temperature": ctx.odin_temperature,
                          "mahalanobis_weights": ctx.mahalanobis.weights.tolist() if ctx.mahalanobis else None,
                          "auc": dict(ctx.calibration_auc)})
            part = partition_sets(history, t)
            heads = np.where(stage_of <= t, stage0, -1) if multi else np.zeros(len(test), dtype=np.int64)
            for name in cfg.scorers:
                scores = combined_scores(name, snap, test.x, ctx, heads)
                sp = ScoredPartition.build(part, scores, test.ids, stage_of, name, Setting(cfg.setting).value)
                sp.check_disjoint()
                metric_rows.append(stage_metrics(sp, seed_index, ctx.calibration_auc.get(name, math.nan)).to_dict())
            feat_rows += [r.to_dict() for r in feature_stats(snap.features(test.x), part, stage_of, seed_index)]

        state["prev"] = snap
        if "buffer" in state:
            cl.update_buffer(state["buffer"], stage)

    return {
        "seed_index": seed_index,
        "seed": seed,
        "status": "ok",
        "accuracy": acc,
        "cl_avg_accuracy": float(np.mean(acc[-1])),
        "avg_forgetting": average_forgetting(acc),
        "stage_reports": stage_reports,
        "metric_rows": metric_rows,
        "feature_stats": feat_rows,
        "calibration": calib,
    }


def _safe_run_seed(cfg: ExperimentConfig, seed_index: int) -> dict:
    try:
        return _clean(run_seed(cfg, seed_index))
    except Exception as exc:  # a failing seed is recorded, the others continue
        log.error("seed %d failed: %s", seed_index, exc)
        return {"seed_index": seed_index, "seed": derive_seed(cfg.master_seed, seed_index), "status": "failed",
                "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}


def summarize(cfg: ExperimentConfig, seed_records: list) -> dict:
    """Per-seed SummaryRows and their across-seed mean/std for every scorer."""
    ok = [r for r in seed_records if r.get("status") == "ok"]
    per_seed = []
    for rec in ok:
        acc = np.array([[np.nan if v is None else v for v in row] for row in rec["accuracy"]])
        rows = [MetricRow(**{k: (math.nan if v is None else v) for k, v in m.items()}) for m in rec["metric_rows"]]
        for name in cfg.scorers:
            s = sequence_summary(rows, acc, name).to_dict()
            s["seed_index"] = rec["seed_index"]
            per_seed.append(s)
    aggregate = []
    numeric = [k for k in (per_seed[0] if per_seed else {}) if k not in ("scorer", "seed_index")]
    for name in cfg.scorers:
        rows = [r for r in per_seed if r["scorer"] == name]
        agg = {"scorer": name, "n_seeds": len(rows)}
        for key in numeric:
            vals = [r[key] for r in rows if r[key] is not None and not math.isnan(r[key])]
            agg[f"{key}_mean"] = nanmean(vals)
            agg[f"{key}_std"] = float(np.std(vals)) if vals else math.nan
        aggregate.append(agg)
    cl_rows = [(r["cl_avg_accuracy"], r["avg_forgetting"]) for r in ok]
    return {
        "per_seed": per_seed,
        "scorers": aggregate,
        "cl": {
            "cl_avg_accuracy_mean": nanmean([a for a, _ in cl_rows]),
            "cl_avg_accuracy_std": float(np.std([a for a, _ in cl_rows])) if cl_rows else math.nan,
            "avg_forgetting_mean": nanmean([f for _, f in cl_rows]),
            "avg_forgetting_std": float(np.std([f for _, f in cl_rows])) if cl_rows else math.nan,
            "n_seeds": len(cl_rows),
            "n_failed": len(seed_records) - len(ok),
        },
    }


def _record(cfg: ExperimentConfig, seeds: dict) -> dict:
    ordered = [seeds[i] for i in sorted(seeds)]
    return _clean({"config": cfg.to_dict(), "config_hash": cfg.hash(), "seeds": ordered,
                   "summary": summarize(cfg, ordered)})


class RecordMismatch(RuntimeError):
    pass


def _write_record(path: Path, record: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(dumps(record))
    os.replace(tmp, path)


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, resume: bool = True,
                   write: bool = True) -> dict:
    """Run every seed of ``cfg`` and return the RunRecord.

    With ``write`` the record is rewritten after each finished seed, so an
    interrupted run resumes at the first missing seed.  An existing record
    from a different configuration is never overwritten.
    """
    cfg.validate()
    out = Path(out_dir or cfg.output_dir)
    path = out / RECORD_FILE
    done: dict[int, dict] = {}
    if write:
        out.mkdir(parents=True, exist_ok=True)
        if path.exists():
            old = json.loads(path.read_text())
            if old.get("config_hash") != cfg.hash():
                raise RecordMismatch(f"{path} holds a different configuration ({old.get('config_hash')})")
            if resume:
                done = {s["seed_index"]: s for s in old["seeds"]
                        if s.get("status") == "ok" and s["seed_index"] < cfg.seeds}
    todo = [i for i in range(cfg.seeds) if i not in done]

    def finished(rec):
        done[rec["seed_index"]] = rec
        if write:
            _write_record(path, _record(cfg, done))
        log.info("seed %d: %s", rec["seed_index"], rec["status"])

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_safe_run_seed, cfg, i) for i in todo]
            for fut in as_completed(futures):
                finished(fut.result())
    else:
        for i in todo:
            finished(_safe_run_seed(cfg, i))
    record = _record(cfg, done)
    if write:
        _write_record(path, record)
    return record


def sweep(base: ExperimentConfig, grid: dict, out_dir=None, jobs: int = 1, key: str = "cl",
          write: bool = True) -> tuple[list, list]:
    """Run the cartesian product of ``grid`` (dotted paths -> value lists).

    Returns ``(records, leaderboard)``; the leaderboard is sorted descending
    by mean CL accuracy (``key="cl"``) or mean calibration AUC (``key="nd"``).
    """
    if key not in ("cl", "nd"):
        raise ConfigError("sweep key must be 'cl' or 'nd'")
    out = Path(out_dir or base.output_dir)
    names = sorted(grid)
    points = list(itertools.product(*(grid[n] for n in names))) if names else [()]
    records, board = [], []
    for i, values in enumerate(points):
        overrides = dict(zip(names, values))
        point_dir = out / f"point_{i:03d}"
        cfg = with_overrides(base, {**overrides, "output_dir": str(point_dir)})
        rec = run_experiment(cfg, point_dir, jobs=jobs, write=write)
        records.append(rec)
        board.append({"point": i, "params": json.dumps(overrides, sort_keys=True), "config_hash": rec["config_hash"],
                      "score": leaderboard_score(rec, key)})
    board.sort(key=lambda r: (-(r["score"] if r["score"] is not None and not math.isnan(r["score"]) else -math.inf),
                              r["point"]))
    return records, board


def leaderboard_score(record: dict, key: str) -> float:
    if key == "cl":
        v = record["summary"]["cl"]["cl_avg_accuracy_mean"]
        return math.nan if v is None else v
    vals = [a for s in record["seeds"] if s.get("status") == "ok"
            for c in s["calibration"] for a in c["auc"].values() if a is not None]
    return nanmean(vals)
