"""Command-line entry point.

Subcommands: ``run`` (full experiment grid), ``ablate`` (2x2 toggle grid),
``sweep`` (hyperparameter sweep), ``fisher-report`` (retention/delta
export from saved snapshots), ``plot`` (static charts from metrics.csv).
Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, NumericError
from .harness import (
    RunConfig,
    export_fisher_report,
    load_config,
    load_fisher_snapshots,
    run_ablation,
    run_experiment,
    run_sweep,
)

OUT_DIR_ENV = "CTTA_OUT_DIR"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    overrides = {}
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "methods", None):
        overrides["methods"] = tuple(args.methods.split(","))
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
        from .harness import validate_config

        violations = validate_config(cfg)
        if violations:
            raise ConfigError(violations)
    return cfg


def _resolve_out(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir)


def _cmd_run(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, cfg)
    result = run_experiment(cfg, out)
    for method, stats in result.summary["per_method"].items():
        print(f"{method}: mean error {stats['overall_mean_error']:.4f} "
              f"({stats['num_records']} batches)")
    print(f"outputs written to {out}")
    if result.failures:
        print(f"{len(result.failures)} run(s) failed numerically; see partial_runs.json",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, cfg)
    rows, results = run_ablation(cfg, out)
    for r in rows:
        print(f"sd={int(r['sd'])} sema={int(r['sema'])}: mean error {r['mean_error']:.4f}")
    print(f"outputs written to {out}")
    if any(res.failures for res in results.values()):
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _resolve_out(args, cfg)
    values = [float(v) for v in args.values.split(",")]
    rows, results = run_sweep(cfg, args.param, values, out)
    for r in rows:
        print(f"{args.param}={r['value']}: mean error {r['mean_error']:.4f}")
    print(f"outputs written to {out}")
    if any(res.failures for res in results.values()):
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_fisher_report(args) -> int:
    run_dir = Path(args.run)
    fisher = load_fisher_snapshots(run_dir)
    out = Path(args.out) if args.out else run_dir / "fisher_report"
    rows, _ = export_fisher_report(fisher, out)
    print(f"{len(rows)} retention rows written to {out}")
    return EXIT_OK


def _read_metrics(path: Path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _cmd_plot(args) -> int:
    run_dir = Path(args.run)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.csv under {run_dir}")
    rows = _read_metrics(metrics)
    out = Path(args.out) if args.out else run_dir / "plots"
    out.mkdir(parents=True, exist_ok=True)

    series: dict = {}
    for row in rows:
        series.setdefault(row["method"], {}).setdefault(int(row["seed"]), []).append(
            float(row["error_rate"]))
    # gnuplot-ready per-segment means: one block per method
    seg_means: dict = {}
    for row in rows:
        key = (row["method"], int(row["segment_index"]))
        seg_means.setdefault(key, []).append(float(row["error_rate"]))
    with open(out / "segment_means.dat", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# method segment_index mean_error\n")
        for (method, seg), vals in sorted(seg_means.items()):
            fh.write(f"{method} {seg} {sum(vals) / len(vals):.6f}\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(9, 4.5))
    for method, by_seed in sorted(series.items()):
        n = min(len(v) for v in by_seed.values())
        mean_curve = [sum(v[i] for v in by_seed.values()) / len(by_seed) for i in range(n)]
        ax.plot(mean_curve, label=method, linewidth=1.2)
    ax.set_xlabel("batch")
    ax.set_ylabel("error rate")
    ax.set_title("per-batch error rate (mean over seeds)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "error_curves.png", dpi=120)
    plt.close(fig)
    print(f"plots written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctta",
        description="Continual test-time adaptation benchmark harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the (method x seed) experiment grid")
    run_p.add_argument("--config", help="JSON config file (all fields optional)")
    run_p.add_argument("--out", help=f"output directory (default: ${OUT_DIR_ENV} or config)")
    run_p.add_argument("--seeds", help="comma-separated seed list override")
    run_p.add_argument("--methods", help="comma-separated method list override")
    run_p.set_defaults(func=_cmd_run)

    ab_p = sub.add_parser("ablate", help="run the 2x2 selective-toggle grid")
    ab_p.add_argument("--config", help="JSON config file")
    ab_p.add_argument("--out", help="output directory")
    ab_p.add_argument("--seeds", help="comma-separated seed list override")
    ab_p.set_defaults(func=_cmd_ablate)

    sw_p = sub.add_parser("sweep", help="sweep one adapter hyperparameter")
    sw_p.add_argument("--config", help="JSON config file")
    sw_p.add_argument("--param", required=True, choices=("lambda", "xi", "delta"))
    sw_p.add_argument("--values", required=True, help="comma-separated values")
    sw_p.add_argument("--out", help="output directory")
    sw_p.add_argument("--seeds", help="comma-separated seed list override")
    sw_p.set_defaults(func=_cmd_sweep)

    fr_p = sub.add_parser("fisher-report", help="retention/delta report from saved snapshots")
    fr_p.add_argument("--run", required=True, help="run directory containing fisher/")
    fr_p.add_argument("--out", help="report output directory")
    fr_p.set_defaults(func=_cmd_fisher_report)

    pl_p = sub.add_parser("plot", help="static charts from a run's metrics.csv")
    pl_p.add_argument("--run", required=True, help="run directory containing metrics.csv")
    pl_p.add_argument("--out", help="plot output directory")
    pl_p.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
