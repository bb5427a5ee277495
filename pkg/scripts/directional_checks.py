"""Run the directional experiments (forgetting, ND degradation, buffer size,
prototype scorers, feature norms, Forg-vs-Out hardness) and print a summary.

Usage: python3 scripts/directional_checks.py [--seeds 10] [--jobs 1] [--out runs/directional]
"""
import argparse
import math
import time

import numpy as np

from cndbench.config import ExperimentConfig
from cndbench.harness import run_experiment


def final_p_auc(rec, scorer="softmax"):
    vals = []
    for s in rec["seeds"]:
        rows = [m for m in s["metric_rows"] if m["scorer"] == scorer]
        last = max(rows, key=lambda m: m["stage"])
        vals.append(np.nan if last["p_auc"] is None else last["p_auc"])
    return np.array(vals)


def stage_value(rec, key, stage, scorer="softmax"):
    return np.array([next((np.nan if m[key] is None else m[key]) for m in s["metric_rows"]
                          if m["scorer"] == scorer and m["stage"] == stage) for s in rec["seeds"]])


def mean_metric(rec, key, scorer):
    per_seed = []
    for s in rec["seeds"]:
        v = [m[key] for m in s["metric_rows"] if m["scorer"] == scorer and m[key] is not None]
        per_seed.append(np.mean(v) if v else np.nan)
    return np.array(per_seed)


def run(raw, seeds, jobs, out, name):
    cfg = ExperimentConfig.from_dict({**raw, "seeds": seeds, "output_dir": f"{out}/{name}"})
    t = time.time()
    rec = run_experiment(cfg, jobs=jobs)
    print(f"[{name}] {time.time() - t:.1f}s  acc={rec['summary']['cl']['cl_avg_accuracy_mean']:.3f} "
          f"forg={rec['summary']['cl']['avg_forgetting_mean']:.3f}")
    return rec


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/directional")
    a = ap.parse_args()
    r = lambda raw, name: run(raw, a.seeds, a.jobs, a.out, name)

    ft = r({"method": "finetune", "scorers": ["softmax"]}, "finetune")
    mas = r({"method": "mas", "scorers": ["softmax"]}, "mas")
    lwf = r({"method": "lwf", "scorers": ["softmax"]}, "lwf")
    er25 = r({"method": "er", "setting": "shared_head", "scorers": ["softmax"],
              "trainer": {"buffer_per_class": 25}}, "er25")
    er50 = r({"method": "er", "setting": "shared_head", "scorers": ["softmax"],
              "trainer": {"buffer_per_class": 50}}, "er50")
    proto = r({"method": "finetune", "scorers": ["softmax", "b1", "b2"]}, "finetune_bias_free")
    dis = r({"method": "finetune", "scorers": ["softmax"], "sequence": {"regime": "disjoint_domain"}}, "disjoint")

    f = lambda rec: rec["summary"]["cl"]["avg_forgetting_mean"]
    print(f"forgetting  FT {f(ft):.4f}  MAS {f(mas):.4f}  LwF {f(lwf):.4f}")
    p2, plast = stage_value(ft, "p_auc", 2), final_p_auc(ft)
    print(f"FT softmax P.AUC stage2 {np.nanmean(p2):.4f}  final {np.nanmean(plast):.4f}")
    pm = final_p_auc(mas)
    print(f"final P.AUC MAS {np.nanmean(pm):.4f} vs FT {np.nanmean(plast):.4f}  wins {int(np.sum(pm > plast))}/{len(pm)}")
    print(f"final P.AUC ER50 {np.nanmean(final_p_auc(er50)):.4f} vs ER25 {np.nanmean(final_p_auc(er25)):.4f}")
    for sc in ("softmax", "b1", "b2"):
        print(f"mAUC {sc} {np.nanmean(mean_metric(proto, 'c_auc', sc)):.4f}")
    wins = 0
    for s in ft["seeds"]:
        g = {row["group"]: row["mean_norm"] for row in s["feature_stats"] if row["stage"] == 1}
        wins += g["in"] > g["out"]
    print(f"stage-1 ||phi|| In > Out in {wins}/{len(ft['seeds'])} seeds")
    last = ft["seeds"][0]["metric_rows"][-1]["stage"]
    fs, fd = stage_value(ft, "forg_out_der", last), stage_value(dis, "forg_out_der", last)
    print(f"final Forg-vs-Out DER same {np.nanmean(fs):.4f}  disjoint {np.nanmean(fd):.4f}")


if __name__ == "__main__":
    main()
