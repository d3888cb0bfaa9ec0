"""Command line entry point.

Results go to stdout as comma-delimited rows; logs go to stderr. Exit codes:
0 success, 1 config error, 2 numeric failure, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, NumericError
from .config import EDITING_METHODS, GENERATION_METHODS, load_config, reference_config, reference_edit_config
from .io import read_jsonl
from .metrics import MetricsRow
from .runner import SWEEP_AXES, SweepError, read_summary_csv, run_editing, run_generation, sweep

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3

logger = logging.getLogger("scoredistill")


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=default, help="override train.seed")
    parser.add_argument("--out", type=Path, default=default, help="output directory")
    parser.add_argument(
        "--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False, help="no stdout tables"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scoredistill", description="Score distillation on Gaussian-mixture oracles.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="generation run (sds, csd, vsd, asd)")
    run.add_argument("--method", choices=GENERATION_METHODS, help="override distill.method")
    edit = sub.add_parser("edit", parents=[common], help="editing run (asd_edit, dds)")
    edit.add_argument("--method", choices=EDITING_METHODS, help="override distill.method")

    sw = sub.add_parser("sweep", parents=[common], help="one run per value of an axis")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--jobs", type=int, default=1, help="parallel child runs")

    sub.add_parser("gradcheck", parents=[common], help="gradient and identity audit")
    sub.add_parser("plot", parents=[common], help="render PNG figures for a run or sweep directory (--out)")
    return parser


def _load(args, editing: bool):
    if args.config is not None:
        config = load_config(args.config)
    else:
        config = reference_edit_config() if editing else reference_config()
    method = getattr(args, "method", None)
    if method:
        config = config.with_distill(method=method)
    if args.seed is not None:
        config = config.with_train(seed=args.seed)
    if args.out is not None:
        config = config.with_train(out_dir=str(args.out))
    return config


def _emit(rows, header, quiet):
    if quiet:
        return
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


def _metrics_table(record):
    names = MetricsRow.field_names()
    return [[getattr(m, n) if n == "step" else f"{getattr(m, n):.10g}" for n in names] for m in record.metrics], names


def _cmd_run(args, editing):
    config = _load(args, editing)
    method = config.distill.method
    if editing and method not in EDITING_METHODS:
        raise ConfigError(f"'edit' needs method in {EDITING_METHODS}, config has {method!r}")
    if not editing and method not in GENERATION_METHODS:
        raise ConfigError(f"'run' needs method in {GENERATION_METHODS}, config has {method!r}")
    record = (run_editing if editing else run_generation)(config)
    rows, names = _metrics_table(record)
    _emit(rows, names, args.quiet)
    for w in record.warnings[:5]:
        logger.warning(w)
    logger.info("finished %s in %.2fs; outputs in %s", method, record.wall_time, config.out_dir or "(none)")
    return EXIT_OK


def _parse_values(axis, text):
    cast = int if axis in ("disc_steps", "seed") else float
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values for axis {axis}: {exc}") from exc


def _cmd_sweep(args):
    config = _load(args, editing=False)
    values = _parse_values(args.axis, args.values)
    records, summary = sweep(config, args.axis, values, out_dir=args.out, jobs=args.jobs)
    names = MetricsRow.field_names()
    rows = [
        [args.axis, v, r.config_hash[:12]] + [r.final.step] + [f"{getattr(r.final, n):.10g}" for n in names[1:]]
        for v, r in zip(values, records)
    ]
    _emit(rows, ["axis", "value", "config_hash", *names], args.quiet)
    if summary is not None:
        logger.info("summary written to %s", summary)
    return EXIT_OK


def _cmd_gradcheck(args):
    from .gradcheck import grad_check_suite

    report = grad_check_suite(args.seed if args.seed is not None else 0)
    _emit(report.rows(), ["check", "status", "worst", "detail"], args.quiet)
    logger.info("gradcheck %s in %.2fs", "passed" if report.passed else "FAILED", report.runtime)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def _cmd_plot(args):
    from .plots import plot_metrics, plot_particles, plot_sweep
    from ..gen import read_particles_csv

    if args.out is None:
        raise ConfigError("plot needs --out pointing at a run or sweep directory")
    out = Path(args.out)
    written = []
    if (out / "summary.csv").exists():
        written.append(plot_sweep(read_summary_csv(out / "summary.csv"), out / "sweep.png"))
    if (out / "metrics.jsonl").exists():
        written.append(plot_metrics(read_jsonl(out / "metrics.jsonl"), out / "metrics.png"))
        cfg_path = args.config if args.config is not None else out / "config.toml"
        if (out / "particles_final.csv").exists() and cfg_path.exists():
            config = load_config(cfg_path)
            points = read_particles_csv(out / "particles_final.csv")
            written.append(plot_particles(points, config.mixture, config.cond_y, out / "particles.png"))
    if not written:
        raise ConfigError(f"{out} has no metrics.jsonl or summary.csv to plot")
    _emit([[str(p)] for p in written], ["figure"], args.quiet)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        if args.command == "run":
            return _cmd_run(args, editing=False)
        if args.command == "edit":
            return _cmd_run(args, editing=True)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        return _cmd_plot(args)
    except SweepError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERIC if isinstance(exc.cause, NumericError) else EXIT_CONFIG
    except NumericError as exc:
        logger.error("numeric failure: %s %s", exc, getattr(exc, "diagnostics", ""))
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
