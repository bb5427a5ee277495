"""Command line entry point: ``cndbench <command> [options]``.

Exit codes: 0 success, 2 configuration/input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, derive_seed
from .datasets import DatasetError, export_csv, generate_sequence
from .harness import RecordMismatch, run_experiment, sweep
from .report import load_records, write_leaderboard, write_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "seeds", None) is not None:
        cfg = replace(cfg, seeds=args.seeds).validate()
    return cfg


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(json.dumps({"valid": True, "config_hash": cfg.hash(), "config": cfg.to_dict()}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load(args)
    seed = derive_seed(cfg.master_seed, args.seed_index)
    seq = generate_sequence(replace(cfg.sequence, seed=seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(seq, out)
    print(f"wrote {out} ({seq.num_stages} stages, seed {seed})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.output_dir)
    record = run_experiment(cfg, out, jobs=args.jobs, resume=not args.fresh)
    write_report([record], out / "report")
    failed = record["summary"]["cl"]["n_failed"]
    print(f"{out / 'record.json'}: {len(record['seeds']) - failed} ok, {failed} failed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_sweep(args) -> int:
    base = _load(args)
    try:
        grid = json.loads(Path(args.grid).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.grid}: {exc}") from None
    if not isinstance(grid, dict) or not all(isinstance(v, list) for v in grid.values()):
        raise ConfigError("grid must map dotted config paths to lists of values")
    out = Path(args.out or base.output_dir)
    records, board = sweep(base, grid, out, jobs=args.jobs, key=args.key)
    write_leaderboard(board, out / "leaderboard.csv")
    write_report(records, out / "report")
    print(f"{out / 'leaderboard.csv'}: {len(board)} points")
    return EXIT_OK


def cmd_report(args) -> int:
    missing = [p for p in args.runs if not Path(p).exists()]
    if missing:
        raise ConfigError(f"no such path: {', '.join(missing)}")
    records = load_records(args.runs)
    if not records:
        raise ConfigError("no record.json found under the given paths")
    paths = write_report(records, args.out)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cndbench", description="Continual novelty detection benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="experiment JSON (defaults when omitted)")
        if seeds:
            sp.add_argument("--seeds", type=int, help="override the number of seeds")

    sp = sub.add_parser("validate-config", help="check a config and print its canonical form")
    common(sp, seeds=False)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("generate-data", help="export a synthetic sequence as CSV")
    common(sp, seeds=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed-index", type=int, default=0)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("run", help="run all seeds of one config")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--fresh", action="store_true", help="ignore finished seeds in an existing record")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="grid over config values")
    common(sp)
    sp.add_argument("--grid", required=True, help='JSON like {"trainer.mas_lambda": [0.1, 1.0]}')
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--key", choices=("cl", "nd"), default="cl")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="tables and plots from run records")
    sp.add_argument("runs", nargs="+", help="record.json files or run directories")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, RecordMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
