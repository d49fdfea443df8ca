"""Command-line front end: run experiments, sweeps, and reports.

Exit codes: 0 when the run reached its target accuracy (or the command has
no target), 2 when a run finished without reaching it, 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .report import (
    IncompatibleRunsError,
    build_speedup_table,
    load_summaries,
    render_resources_text,
    render_speedup_text,
    report_resources,
    write_speedup_csv,
)
from .runner import run_experiment

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_REACHED = 2

SWEEP_AXES = ("straggler_fraction", "delay_max", "num_clients", "alpha", "strategy")

_AXIS_TO_KEY = {
    "straggler_fraction": "straggler_fraction",
    "delay_max": "straggler_delay_max_s",
    "num_clients": "num_clients",
    "alpha": "alpha",
    "strategy": "strategy",
}

SWEEP_HEADER = "axis_value,strategy,repeat,steps_to_target,sim_time_s,reached"


def _load(args) -> ExperimentConfig:
    config = load_config(args.config)
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(config, overrides)


def cmd_run(args) -> int:
    config = _load(args)
    out = Path(args.out)
    summary = run_experiment(config, out, plots=not args.no_plots)
    print(f"wrote {out / 'trace.csv'}")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK if summary["reached"] else EXIT_NOT_REACHED


def _axis_values(axis: str, raw_values: str) -> list:
    values = [v for v in (part.strip() for part in raw_values.split(",")) if v]
    if not values:
        raise ConfigError("sweep needs at least one --values entry")
    if axis == "strategy":
        return values
    if axis == "num_clients":
        return [int(v) for v in values]
    return [float(v) for v in values]


def cmd_sweep(args) -> int:
    base = _load(args)
    axis_values = _axis_values(args.axis, args.values)
    if args.strategies and args.axis == "strategy":
        raise ConfigError("--strategies conflicts with --axis strategy")
    strategies = (
        [s.strip() for s in args.strategies.split(",") if s.strip()]
        if args.strategies
        else [base.strategy]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    key = _AXIS_TO_KEY[args.axis]
    rows: list[dict] = []
    failures = []
    for value in axis_values:
        for strategy in ([value] if args.axis == "strategy" else strategies):
            for repeat in range(base.repeats):
                seed = base.seed + repeat
                overrides = [f"seed={seed}", f"strategy={strategy}"]
                if args.axis != "strategy":
                    overrides.append(f"{key}={value}")
                point_dir = out / f"{args.axis}_{value}" / strategy / f"seed_{seed}"
                try:
                    config = apply_overrides(base, overrides)
                    summary = run_experiment(
                        config, point_dir, plots=not args.no_plots
                    )
                    rows.append(
                        {
                            "axis_value": value,
                            "strategy": strategy,
                            "repeat": repeat,
                            "steps_to_target": summary["steps_to_target"],
                            "sim_time_s": (
                                summary["sim_time_to_target_s"]
                                if summary["reached"]
                                else summary["final_sim_time_s"]
                            ),
                            "reached": summary["reached"],
                        }
                    )
                except Exception as exc:  # record and keep sweeping
                    failures.append(f"{point_dir}: {exc}")
                    print(f"sweep point failed: {point_dir}: {exc}", file=sys.stderr)
                    rows.append(
                        {
                            "axis_value": value,
                            "strategy": strategy,
                            "repeat": repeat,
                            "steps_to_target": None,
                            "sim_time_s": None,
                            "reached": False,
                        }
                    )
    csv_path = out / "sweep.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for row in rows:
            steps = "" if row["steps_to_target"] is None else row["steps_to_target"]
            time_s = "" if row["sim_time_s"] is None else format(row["sim_time_s"], ".6g")
            fh.write(
                f"{row['axis_value']},{row['strategy']},{row['repeat']},"
                f"{steps},{time_s},{str(row['reached']).lower()}\n"
            )
    if failures:
        (out / "errors.txt").write_text("\n".join(failures) + "\n", encoding="utf-8")
    if not args.no_plots:
        from . import plots

        plots.sweep_figure(rows, args.axis, out / "sweep.png")
    print(f"wrote {csv_path} ({len(rows)} rows, {len(failures)} failures)")
    return EXIT_OK


def cmd_report(args) -> int:
    summaries = load_summaries(args.runs_dir)
    rows = build_speedup_table(summaries)
    text = render_speedup_text(rows)
    print(text, end="")
    out = Path(args.out) if args.out else Path(args.runs_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_speedup_csv(rows, out / "report.csv")
    (out / "report.txt").write_text(text, encoding="utf-8")
    if not args.no_plots:
        from . import plots

        plots.speedup_figure(rows, out / "report.png")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_resources(args) -> int:
    config = _load(args)
    report = report_resources(config)
    text = render_resources_text(report)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "resources.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out / "resources.txt").write_text(text, encoding="utf-8")
        if not args.no_plots:
            from . import plots

            plots.resources_figure(report, out / "resources.png")
        print(f"wrote {out / 'resources.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftte",
        description="Buffered semi-asynchronous federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="experiment JSON file")
            p.add_argument(
                "--set", action="append", metavar="KEY=VALUE",
                help="override a config key (repeatable)",
            )
            p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--no-plots", action="store_true", help="skip PNG rendering")

    p_run = sub.add_parser("run", help="run one experiment")
    add_common(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument(
        "--strategies", help="comma-separated strategies to run at each point"
    )
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_report = sub.add_parser("report", help="build a speedup table from run outputs")
    add_common(p_report, needs_config=False)
    p_report.add_argument("runs_dir", help="directory containing summary.json files")
    p_report.add_argument("--out", help="output directory (defaults to runs_dir)")
    p_report.set_defaults(fn=cmd_report)

    p_res = sub.add_parser("resources", help="client memory and payload report")
    add_common(p_res)
    p_res.add_argument("--out", help="optional output directory")
    p_res.set_defaults(fn=cmd_resources)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, IncompatibleRunsError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception:
        traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
