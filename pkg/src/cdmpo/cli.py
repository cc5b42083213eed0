"""Command-line entry points: train, eval, ablate, plot.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O or
file-format error. Every command is deterministic given its inputs and
seeds; wall-clock timestamps only ever land in the sidecar run manifest.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .config import load_run_config, run_config_from_dict
from .errors import CheckpointError, ConfigError, NumericalError
from .metrics import read_jsonl
from .plotting import aggregate_runs, render_line_plot
from .trainer import Trainer, count_violations

__all__ = ["main"]

OUT_ROOT_ENV = "CDMPO_OUT_ROOT"


def _default_out(config_path: str, seed: int | None) -> Path:
    stem = Path(config_path).stem
    root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
    suffix = f"-seed{seed}" if seed is not None else ""
    return root / f"{stem}{suffix}"


def _cmd_train(args: argparse.Namespace) -> int:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides.append(f"trainer.seed={args.seed}")
    cfg = load_run_config(args.config, overrides)
    out = Path(args.out) if args.out else (
        Path(cfg.out_dir) if cfg.out_dir else _default_out(args.config, cfg.trainer.seed)
    )
    trainer = Trainer(cfg)
    summary = trainer.run(out)
    print(
        f"trained {summary['env_steps']} steps over {summary['episodes']} episodes "
        f"({summary['violations']} violations); outputs in {out}"
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else ckpt.parent / "config.yaml"
    if not config_path.exists():
        raise ConfigError(
            f"no run config found at {config_path}; pass --config explicitly"
        )
    cfg = load_run_config(config_path)
    trainer = Trainer(cfg)
    trainer.load_checkpoint(ckpt)
    summary, records = trainer.evaluate(args.episodes, args.seed)
    out_path = Path(args.out) if args.out else ckpt.parent / "eval_episodes.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        import json

        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    for key in (
        "episodes",
        "return_mean",
        "return_median",
        "cost_mean",
        "cost_median",
        "violation_rate",
    ):
        print(f"{key}: {summary[key]}")
    print(f"per-episode records: {out_path}")
    return 0


def _ablate_worker(job: dict) -> dict:
    """Run one (variant, seed) cell; returns a result row. Must stay
    importable at module level for process pools."""
    try:
        cfg = run_config_from_dict(job["base"], job["overrides"])
        trainer = Trainer(cfg)
        summary = trainer.run(job["out_dir"])
        episodes = read_jsonl(Path(job["out_dir"]) / "episodes.jsonl")
        violations = count_violations(
            [e["cost"] for e in episodes], cfg.trainer.d
        )
        metrics = read_jsonl(Path(job["out_dir"]) / "metrics.jsonl")
        last = metrics[-1] if metrics else {}
        return {
            "variant": job["name"],
            "seed": job["seed"],
            "status": "ok",
            "violations": violations,
            "episodes": summary["episodes"],
            "return_mean": last.get("return_mean"),
            "cost_mean": last.get("cost_mean"),
            "out_dir": job["out_dir"],
        }
    except Exception as err:  # noqa: BLE001 - per-variant failures must not kill the grid
        return {
            "variant": job["name"],
            "seed": job["seed"],
            "status": f"error: {err}",
            "violations": None,
            "episodes": None,
            "return_mean": None,
            "cost_mean": None,
            "out_dir": job["out_dir"],
        }


def _load_grid(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        grid = yaml.safe_load(fh)
    if not isinstance(grid, dict):
        raise ConfigError(f"{path}: grid file must be a mapping")
    for key in ("variants", "seeds"):
        if key not in grid:
            raise ConfigError(f"{path}: grid file needs a '{key}' list")
    base = grid.get("base")
    if isinstance(base, str):
        base_path = (Path(path).parent / base).resolve()
        with open(base_path, "r", encoding="utf-8") as fh:
            grid["base"] = yaml.safe_load(fh)
    if not isinstance(grid.get("base"), dict):
        raise ConfigError(f"{path}: 'base' must be a config mapping or a path to one")
    return grid


def _cmd_ablate(args: argparse.Namespace) -> int:
    grid = _load_grid(args.grid)
    out_root = Path(args.out) if args.out else _default_out(args.grid, None)
    out_root.mkdir(parents=True, exist_ok=True)

    jobs = []
    for variant in grid["variants"]:
        if "name" not in variant:
            raise ConfigError("every grid variant needs a name")
        var_overrides = variant.get("overrides", {}) or {}
        for seed in grid["seeds"]:
            overrides = [f"{k}={yaml.safe_dump(v).strip()}" for k, v in var_overrides.items()]
            overrides.append(f"trainer.seed={int(seed)}")
            jobs.append(
                {
                    "name": variant["name"],
                    "seed": int(seed),
                    "base": grid["base"],
                    "overrides": overrides,
                    "out_dir": str(out_root / variant["name"] / f"seed{seed}"),
                }
            )

    workers = args.workers or int(grid.get("workers", 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablate_worker, jobs))
    else:
        rows = [_ablate_worker(job) for job in jobs]

    table_path = out_root / "table.csv"
    fields = ["variant", "seed", "status", "violations", "episodes", "return_mean", "cost_mean", "out_dir"]
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)

    print(f"{'variant':<22}{'seed':>6}{'violations':>12}  status")
    for row in rows:
        violations = row["violations"] if row["violations"] is not None else "-"
        print(f"{row['variant']:<22}{row['seed']:>6}{violations!s:>12}  {row['status']}")
    by_variant: dict[str, list[int]] = {}
    for row in rows:
        if row["status"] == "ok":
            by_variant.setdefault(row["variant"], []).append(row["violations"])
    for name, counts in by_variant.items():
        print(f"{name}: median violations {np.median(counts):g} over {len(counts)} seeds")
    print(f"table: {table_path}")

    if any(row["status"] != "ok" for row in rows):
        return 1
    return 0


_PLOT_SPECS = (
    ("return_mean", "return.svg", "training return (recent episodes)", None),
    ("cost_mean", "cost.svg", "training episodic cost", "d"),
    ("lambda", "lambda.svg", "Lagrange multiplier", None),
)


def _cmd_plot(args: argparse.Namespace) -> int:
    runs = []
    for path in args.metrics:
        records = read_jsonl(path)
        if not records:
            raise ValueError(f"{path}: empty metrics file")
        runs.append(records)

    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    n = min(len(r) for r in runs)
    x = np.array([rec["env_steps"] for rec in runs[0][:n]], dtype=np.float64)

    for key, filename, ylabel, ref_key in _PLOT_SPECS:
        ys = []
        for records in runs:
            ys.append(
                np.array(
                    [
                        rec.get(key) if rec.get(key) is not None else np.nan
                        for rec in records[:n]
                    ],
                    dtype=np.float64,
                )
            )
        mean, std = aggregate_runs(ys)
        ref = None
        if ref_key is not None:
            ref = runs[0][0].get(ref_key)
        render_line_plot(
            out_dir / filename,
            x,
            mean,
            std,
            title=f"{ylabel} ({len(runs)} run{'s' if len(runs) > 1 else ''})",
            xlabel="environment steps",
            ylabel=ylabel,
            ref=ref,
            ref_label="cost limit" if ref_key == "d" else "",
        )
        print(f"wrote {out_dir / filename}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdmpo",
        description="Train and analyze conservative constrained-RL runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run training from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="dotted-path config override, repeatable",
    )
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--seed", type=int, help="override trainer.seed")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--config", help="run config (defaults to the checkpoint's sidecar)")
    p_eval.add_argument("--out", help="path for per-episode records")

    p_ablate = sub.add_parser("ablate", help="run a variant grid and tabulate violations")
    p_ablate.add_argument("--grid", required=True)
    p_ablate.add_argument("--out", help="output root directory")
    p_ablate.add_argument("--workers", type=int, help="parallel processes")

    p_plot = sub.add_parser("plot", help="render SVG training curves from metrics files")
    p_plot.add_argument("--metrics", nargs="+", required=True)
    p_plot.add_argument("--out", help="directory for the images")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "ablate": _cmd_ablate,
        "plot": _cmd_plot,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError, ValueError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
