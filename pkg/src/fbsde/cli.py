#!/usr/bin/env python3
"""
fbsde/cli.py - Deep FBSDE solver CLI

Entry point for all experiment commands. Each command reads a JSON run
config, writes its CSVs into the output directory next to the resolved
config and appends to the run's events.jsonl.

Usage:
    fbsde train --config runs/bs5.json
    fbsde evaluate --config runs/bs5.json --checkpoint runs/bs5/checkpoint.json
    fbsde generalize --config runs/bs5.json --distances 0,0.05,0.1
    fbsde convergence --out runs/gbm
    fbsde timings runs/bs5-fc runs/bs5-naisnet --out runs/bs5-compare

Exit codes: 0 ok, 1 I/O failure, 2 config error, 3 checkpoint error,
4 numerical divergence.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from fbsde.config import RunConfig, load_config
from fbsde.core import (
    CHECKPOINT_FILE, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK,
    ConfigError, FBSDEError, append_event, configure_logging,
)
from fbsde.nets import load_checkpoint, save_checkpoint
from fbsde.report import (
    evaluate_error_curve, generalization_sweep, merge_timings, timing_table, write_convergence,
    write_error_curve, write_generalization, write_loss_curve, write_timings,
)
from fbsde.sampler import strong_convergence_study
from fbsde.trainer import train_multilevel, train_single_level

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with all subcommands."""
    parser = argparse.ArgumentParser(
        prog="fbsde",
        description="Deep FBSDE solver for high-dimensional semi-linear PDEs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Commands:
  train        Train the shared network (single-level or multilevel)
  evaluate     Relative error curve of a checkpoint along fresh paths
  generalize   Error at perturbed initial conditions, no retraining
  convergence  Euler-Maruyama vs exact GBM strong-convergence study
  timings      Architecture / mode comparison table from several training runs

Examples:
  fbsde train --config bs5.json --out runs/bs5
  fbsde evaluate --config bs5.json --out runs/bs5
  fbsde generalize --config bs5.json --out runs/bs5 --distances 0,0.1,0.2
  fbsde convergence --out runs/gbm
  fbsde timings runs/bs5-fc runs/bs5-naisnet --out runs/bs5-compare
"""
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", "-o", help="Output directory (overrides output.directory)")
    common.add_argument("--threads", "-j", type=int, help="Worker threads (overrides training.threads)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    subparsers = parser.add_subparsers(dest="command", help="Command")

    p_train = subparsers.add_parser("train", parents=[common], help="Train the network")
    p_train.add_argument("--config", "-c", required=True, help="Run config (JSON)")

    p_eval = subparsers.add_parser("evaluate", parents=[common], help="Write the error curve")
    p_eval.add_argument("--config", "-c", required=True, help="Run config (JSON)")
    p_eval.add_argument("--checkpoint", help="Checkpoint (default: <out>/checkpoint.json)")

    p_gen = subparsers.add_parser("generalize", parents=[common], help="Perturbed initial conditions")
    p_gen.add_argument("--config", "-c", required=True, help="Run config (JSON)")
    p_gen.add_argument("--checkpoint", help="Checkpoint (default: <out>/checkpoint.json)")
    p_gen.add_argument("--distances", help="Comma-separated relative distances in [0, 1]")

    p_conv = subparsers.add_parser("convergence", parents=[common], help="Strong convergence study")
    p_conv.add_argument("--config", "-c", help="Run config (JSON); convergence section only")

    p_tim = subparsers.add_parser("timings", parents=[common], help="Merge timing tables of several runs")
    p_tim.add_argument("runs", nargs="+", help="Training run directories, one table row each")
    p_tim.set_defaults(config=None)

    return parser


# =============================================================================
# Helpers
# =============================================================================

def _prepare(args, require_problem: bool = True) -> RunConfig:
    config = load_config(args.config, require_problem=require_problem)
    config.apply_overrides(args.out, args.threads)
    args.run_dir = config.output_dir
    args.run_dir.mkdir(parents=True, exist_ok=True)
    return config


def _checkpoint_path(args, config: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else config.output_dir / CHECKPOINT_FILE


def _parse_distances(text: Optional[str]) -> Optional[list]:
    if text is None:
        return None
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError("--distances", f"expected comma-separated numbers, got {text!r}") from None


# =============================================================================
# Commands
# =============================================================================

def cmd_train(args) -> int:
    """Train single-level or multilevel per config; write loss curve, checkpoint, timings."""
    config = _prepare(args)
    problem = config.problem()
    train_config = config.train_config(problem)
    out = config.output_dir
    config.save_resolved(problem)

    architecture = train_config.network.architecture.value
    append_event(out, {"type": "run_started", "command": "train", "problem": problem.name,
                       "d": problem.d, "architecture": architecture,
                       "mode": "multi" if train_config.schedule else "single"})
    print(f"\U0001F680 Training {problem.name} (d={problem.d}) with {architecture}")

    if train_config.schedule is not None:
        levels = train_config.schedule.steps_per_level
        print(f"\U0001F4CA Levels: {', '.join(str(n) for n in levels)} steps")

        def on_level(level, steps, count):
            append_event(out, {"type": "level_started", "level": level, "steps": steps, "iterations": count})

        report = train_multilevel(problem, train_config, on_level=on_level)
    else:
        report = train_single_level(problem, train_config)

    report.checkpoint = str(save_checkpoint(report.params, out / CHECKPOINT_FILE))
    write_loss_curve(report, out, config["output"]["record_timing"])
    evaluation = config["evaluation"]
    write_timings(timing_table([report], problem, evaluation["oracle_samples"], evaluation["seed"]), out)

    append_event(out, {"type": "run_completed", "command": "train", "iterations": report.iterations,
                       "final_loss": report.final_loss, "y0": report.final_y0,
                       "seconds": report.total_seconds, "checkpoint": report.checkpoint})
    if report.final_loss is not None:
        print(f"\u2705 {report.iterations} iterations, final loss {report.final_loss:.4e}")
    else:
        print("\u2705 0 iterations, checkpoint holds the initialization")
    print(f"\U0001F4C8 Y0 = {report.final_y0:.6e}")
    print(f"\U0001F4BE Checkpoint: {report.checkpoint}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """Write error_curve.csv, sample_paths.csv and path_errors.csv for a checkpoint."""
    config = _prepare(args)
    problem = config.problem()
    params = load_checkpoint(_checkpoint_path(args, config), expected=config.net_config(problem))
    out = config.output_dir
    config.save_resolved(problem)
    evaluation = config["evaluation"]
    append_event(out, {"type": "run_started", "command": "evaluate", "problem": problem.name,
                       "checkpoint_checksum": params.checksum()})

    curve = evaluate_error_curve(problem, params, evaluation["M_eval"], config.eval_steps(),
                                 evaluation["seed"], evaluation["oracle_samples"])
    paths = write_error_curve(curve, out)

    append_event(out, {"type": "run_completed", "command": "evaluate",
                       "mean_rel_err_t0": float(curve.mean_rel_err[0]),
                       "mean_rel_err_T": float(curve.mean_rel_err[-1])})
    print(f"\u2705 Mean relative error: {curve.mean_rel_err[0]:.3e} at t=0, "
          f"{curve.mean_rel_err[-1]:.3e} at T")
    for path in paths:
        print(f"\U0001F4C4 {path}")
    return EXIT_OK


def cmd_generalize(args) -> int:
    """Write generalization.csv for perturbed initial conditions."""
    config = _prepare(args)
    distances = config.distances(_parse_distances(args.distances))
    problem = config.problem()
    params = load_checkpoint(_checkpoint_path(args, config), expected=config.net_config(problem))
    out = config.output_dir
    config.save_resolved(problem)
    evaluation = config["evaluation"]
    append_event(out, {"type": "run_started", "command": "generalize", "problem": problem.name,
                       "distances": distances, "K": evaluation["K"]})

    sweep = generalization_sweep(problem, params, distances, evaluation["K"], evaluation["seed"],
                                 evaluation["oracle_samples"])
    path = write_generalization([sweep], out)

    append_event(out, {"type": "run_completed", "command": "generalize", "protocol": sweep.protocol,
                       "absolute_fallback": sweep.absolute_fallback, "checksum": sweep.checksum})
    if sweep.absolute_fallback:
        print("\u26A0\uFE0F  ||xi|| = 0: distances applied as absolute perturbations")
    for distance, error in zip(sweep.rel_distances, sweep.rel_errors):
        print(f"   {distance:6.2f}%  ->  {error:.4f}%")
    print(f"\u2705 {path}")
    return EXIT_OK


def cmd_convergence(args) -> int:
    """Write convergence.csv for the Euler vs exact GBM study."""
    config = _prepare(args, require_problem=False)
    out = config.output_dir
    config.save_resolved()
    c = config["convergence"]
    steps = c["steps"]
    if not steps or any(isinstance(n, bool) or not isinstance(n, int) for n in steps):
        raise ConfigError("convergence.steps", f"expected a non-empty list of integers, got {steps!r}")
    if c["x0"] <= 0 or c["T"] <= 0 or c["paths"] < 1:
        raise ConfigError("convergence", "x0 and T must be positive and paths >= 1")
    append_event(out, {"type": "run_started", "command": "convergence", "steps": steps, "paths": c["paths"]})

    try:
        rows = strong_convergence_study(mu=float(c["mu"]), sigma=float(c["sigma"]), T=float(c["T"]),
                                        x0=float(c["x0"]), steps=steps, paths=c["paths"], seed=c["seed"])
    except FBSDEError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError("convergence.steps", str(e)) from e
    path = write_convergence(rows, out)

    append_event(out, {"type": "run_completed", "command": "convergence",
                       "rms_errors": [r.rms_error for r in rows]})
    for row in rows:
        ratio = f"{row.ratio:.3f}" if row.ratio is not None else "-"
        print(f"   N={row.N:4d}  rms={row.rms_error:.4e}  ratio={ratio}")
    print(f"\u2705 {path}")
    return EXIT_OK


def cmd_timings(args) -> int:
    """Write one timings.csv holding the rows of every given training run."""
    config = _prepare(args, require_problem=False)
    out = config.output_dir
    runs = [Path(run) for run in args.runs]
    append_event(out, {"type": "run_started", "command": "timings", "runs": [str(r) for r in runs]})

    rows = merge_timings(runs)
    path = write_timings(rows, out)

    append_event(out, {"type": "run_completed", "command": "timings", "rows": len(rows)})
    for row in rows:
        print(f"   {row.architecture:8s} {row.mode:6s} {row.total_seconds:10.2f}s  {row.iterations} iterations")
    print(f"\u2705 {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "generalize": cmd_generalize,
    "convergence": cmd_convergence,
    "timings": cmd_timings,
}


def run(args) -> int:
    """Run one parsed command, converting failures to exit codes."""
    try:
        return COMMANDS[args.command](args)
    except FBSDEError as e:
        print(f"\u274C {type(e).__name__}: {e}", file=sys.stderr)
        code = e.exit_code
    except OSError as e:
        print(f"\u274C I/O error: {e}", file=sys.stderr)
        code = EXIT_FAILURE
    logger.debug("%s failed", args.command, exc_info=True)
    run_dir = getattr(args, "run_dir", None)
    if run_dir is not None:
        try:
            append_event(run_dir, {"type": "run_failed", "command": args.command, "exit_code": code})
        except OSError:
            pass
    return code


def main(argv=None):
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(EXIT_CONFIG)

    configure_logging(args.verbose)
    sys.exit(run(args))


if __name__ == "__main__":
    main()
