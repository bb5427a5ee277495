"""CSV tables and SVG plots from one or more run records.

Output is a pure function of the records: re-reporting gives identical bytes.
"""
from __future__ import annotations

import csv
import html
import json
import math
from pathlib import Path

import numpy as np

from .eval import FeatureStatRow, MetricRow, SummaryRow

NA = "NA"
PLOT_METRICS = ("c_auc", "r_auc", "p_auc", "c_der", "in_forg_der", "forg_out_der")
CONFIG_COLS = ["config_hash", "method", "setting", "regime"]
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return NA if not math.isfinite(v) else f"{float(v):.6f}"
    return str(v)


def _num(v) -> float:
    return math.nan if v is None else float(v)


def _mean_std(vals) -> tuple[float, float]:
    vals = [v for v in vals if not math.isnan(v)]
    if not vals:
        return math.nan, math.nan
    return math.fsum(vals) / len(vals), float(np.std(vals))


def load_records(paths) -> list[dict]:
    """Accept record files or run directories (searched recursively)."""
    found = []
    for p in map(Path, paths):
        found += sorted(p.rglob("record.json")) if p.is_dir() else [p]
    records = [json.loads(f.read_text()) for f in found]
    return sorted(records, key=lambda r: (r["config"]["method"], r["config"]["setting"], r["config_hash"]))


def _config_cols(rec) -> list:
    c = rec["config"]
    return [rec["config_hash"], c["method"], c["setting"], c["sequence"]["regime"]]


def _ok(rec):
    return [s for s in rec["seeds"] if s.get("status") == "ok"]


def _write(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([fmt(v) for v in row] for row in rows)


def metric_rows(records) -> list:
    cols = MetricRow.columns()
    rows = []
    for rec in records:
        for s in _ok(rec):
            for m in sorted(s["metric_rows"], key=lambda m: (m["scorer"], m["stage"])):
                rows.append(_config_cols(rec) + [m[c] for c in cols])
    return rows


def stage_mean_rows(records) -> tuple[list, list]:
    metrics = [c for c in MetricRow.columns() if c not in ("seed", "stage", "scorer")]
    header = CONFIG_COLS + ["scorer", "stage", "n_seeds"] + metrics
    rows = []
    for rec in records:
        groups: dict = {}
        for s in _ok(rec):
            for m in s["metric_rows"]:
                groups.setdefault((m["scorer"], m["stage"]), []).append(m)
        for (scorer, stage) in sorted(groups):
            ms = groups[(scorer, stage)]
            rows.append(_config_cols(rec) + [scorer, stage, len(ms)]
                        + [_mean_std([_num(m[k]) for m in ms])[0] for k in metrics])
    return header, rows


def summary_rows(records) -> tuple[list, list]:
    fields = [c for c in SummaryRow.columns() if c != "scorer"]
    header = CONFIG_COLS + ["scorer", "n_seeds"] + [f"{f}_{s}" for f in fields for s in ("mean", "std")]
    rows = []
    for rec in records:
        per_seed = rec["summary"]["per_seed"]
        for scorer in rec["config"]["scorers"]:
            mine = [r for r in per_seed if r["scorer"] == scorer]
            stats = []
            for f in fields:
                stats += list(_mean_std([_num(r[f]) for r in mine]))
            rows.append(_config_cols(rec) + [scorer, len(mine)] + stats)
    return header, rows


def cl_rows(records) -> tuple[list, list]:
    header = CONFIG_COLS + ["seed", "cl_avg_accuracy", "avg_forgetting", "final_stage_accuracies"]
    rows = []
    for rec in records:
        ok = _ok(rec)
        for s in ok:
            final = " ".join(fmt(v) for v in s["accuracy"][-1])
            rows.append(_config_cols(rec) + [s["seed_index"], s["cl_avg_accuracy"], s["avg_forgetting"], final])
        acc = _mean_std([_num(s["cl_avg_accuracy"]) for s in ok])
        forg = _mean_std([_num(s["avg_forgetting"]) for s in ok])
        rows.append(_config_cols(rec) + ["mean", acc[0], forg[0], ""])
        rows.append(_config_cols(rec) + ["std", acc[1], forg[1], ""])
    return header, rows


def feature_rows(records) -> tuple[list, list]:
    cols = FeatureStatRow.columns()
    rows = []
    for rec in records:
        for s in _ok(rec):
            rows += [_config_cols(rec) + [r[c] for c in cols] for r in s["feature_stats"]]
    return CONFIG_COLS + cols, rows


# ---------------------------------------------------------------------------
# plots


def svg_line_plot(series: dict, title: str, ylabel: str, width: int = 480, height: int = 320) -> str:
    """Minimal SVG line chart; ``series`` maps a label to ``[(x, y), ...]``.

    Each point carries its value in a ``data-y`` attribute and a tooltip.
    """
    pad_l, pad_r, pad_t, pad_b = 56, 110, 30, 40
    pts = [(x, y) for s in series.values() for x, y in s if not math.isnan(y)]
    xs = sorted({x for x, _ in pts}) or [1]
    lo = min([y for _, y in pts], default=0.0)
    hi = max([y for _, y in pts], default=1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    lo, hi = lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo)
    x0, x1 = min(xs), max(xs)
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (pw / 2 if x1 == x0 else (x - x0) / (x1 - x0) * pw)

    def py(y):
        return pad_t + (hi - y) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{html.escape(title)}</text>',
           f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>']
    for x in xs:
        out.append(f'<text x="{px(x):.1f}" y="{pad_t + ph + 15}" text-anchor="middle">{x}</text>')
    for i in range(5):
        y = lo + (hi - lo) * i / 4
        out.append(f'<text x="{pad_l - 6}" y="{py(y) + 4:.1f}" text-anchor="end">{y:.3f}</text>')
    out.append(f'<text x="{pad_l + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">stage</text>')
    out.append(f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{html.escape(ylabel)}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        good = [(x, y) for x, y in s if not math.isnan(y)]
        if len(good) > 1:
            path = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in good)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
        for x, y in good:
            out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}" data-series="{html.escape(label)}" '
                       f'data-x="{x}" data-y="{y:.6f}"><title>{html.escape(label)} stage {x}: {y:.6f}</title></circle>')
        ly = pad_t + 14 * i + 6
        out.append(f'<rect x="{pad_l + pw + 10}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{pad_l + pw + 24}" y="{ly + 1}">{html.escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_plots(header: list, rows: list, out: Path) -> list[Path]:
    idx = {c: i for i, c in enumerate(header)}
    written = []
    for cfg_hash in sorted({r[0] for r in rows}):
        mine = [r for r in rows if r[0] == cfg_hash]
        method, setting = mine[0][idx["method"]], mine[0][idx["setting"]]
        for metric in PLOT_METRICS:
            series: dict = {}
            for r in mine:
                series.setdefault(r[idx["scorer"]], []).append((r[idx["stage"]], _num(r[idx[metric]])))
            path = out / f"{method}_{setting}_{cfg_hash}_{metric}.svg"
            path.write_text(svg_line_plot(series, f"{method} / {setting}: {metric}", metric))
            written.append(path)
    return written


def write_report(records, out_dir) -> list[Path]:
    """Write metrics, stage_means, summary, cl_performance, feature_stats CSVs and SVG plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    _write(out / "metrics.csv", CONFIG_COLS + MetricRow.columns(), metric_rows(records))
    paths.append(out / "metrics.csv")
    sm_header, sm_rows = stage_mean_rows(records)
    for name, (header, rows) in {"stage_means.csv": (sm_header, sm_rows), "summary.csv": summary_rows(records),
                                 "cl_performance.csv": cl_rows(records),
                                 "feature_stats.csv": feature_rows(records)}.items():
        _write(out / name, header, rows)
        paths.append(out / name)
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    paths += write_plots(sm_header, sm_rows, plots)
    return paths


def write_leaderboard(board: list, path) -> None:
    _write(Path(path), ["rank", "point", "score", "config_hash", "params"],
           [[i + 1, r["point"], r["score"], r["config_hash"], r["params"]] for i, r in enumerate(board)])
