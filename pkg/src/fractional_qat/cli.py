"""``fraqat`` command line: train, sweep-bits, compare-schedules, calibrate, outlier-report.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, resolved_text
from .layers import ToyModel, observe_activations, tag_summary
from .quant import CalibrationError, Mode, QuantizationError, check_bits
from .reporting import (
    atomic_write_text,
    write_calibration_csv,
    write_comparison,
    write_metrics_csv,
    write_outlier_report,
    write_status,
    write_sweep_csv,
)
from .schedule import ScheduleError
from .trainer import (
    RunMetrics,
    TrainingAborted,
    bit_sweep,
    calibrate_task,
    calibrate_then_train_static,
    compare_schedules,
    run_qat,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("fractional_qat")


class RunFailed(RuntimeError):
    """Runtime failure after validation; carries whatever was written so far."""

    def __init__(self, message: str, artifacts=(), detail=None):
        super().__init__(message)
        self.artifacts = list(artifacts)
        self.detail = detail or {}


def _apply_seed(cfg: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    """``--seed`` sets the task seed and replaces the multi-seed lists with that one seed."""
    if seed is None:
        return cfg
    cfg = cfg.with_seed(seed)
    return replace(cfg, sweep={**cfg.sweep, "seeds": (seed,)}, compare={**cfg.compare, "seeds": (seed,)})


def _bits_arg(text: str):
    try:
        return tuple(check_bits(float(t)) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# -- plans (what --dry-run prints) --

def _plan(cmd: str, cfg: ExperimentConfig, args) -> List[str]:
    lines = [f"command: {cmd}", f"output: {args.out}"]
    if cmd == "train":
        sched = cfg.precision_schedule()
        lines.append(f"schedule: {sched.name}, {sched.total_epochs} epochs, stages {list(sched.stages)}")
        lines.append(f"activations: {cfg.quant['act_mode'].value}, {cfg.quant['act_bits']:g} bits")
        lines.append(f"selection: {cfg.trainer['selection'].value}")
    elif cmd == "sweep-bits":
        lines.append(f"bits: {list(args.bits or cfg.sweep['bits'])}")
        lines.append(f"seeds: {list(cfg.sweep_seeds())}")
    elif cmd == "compare-schedules":
        lines.append(f"budget: {cfg.schedule['epochs']} epochs; seeds {list(cfg.compare['seeds'])}")
    elif cmd == "calibrate":
        lines.append(f"samples: {cfg.quant['calibration_samples']}, k_sigma {cfg.quant['k_sigma']:g}")
    elif cmd == "outlier-report":
        lines.append(f"model: {args.checkpoint or 'teacher'}; "
                     f"{cfg.report['batches']} batches of {cfg.report['batch_size']}")
    return lines


# -- commands; each returns the list of files it wrote --

def cmd_train(cfg: ExperimentConfig, out: str) -> List[str]:
    task, tc = cfg.synthetic_task(), cfg.trainer_config()
    teacher = task.build_teacher()
    metrics_path = os.path.join(out, "metrics.csv")
    abort_path = os.path.join(out, "abort.fqat")
    done = []
    try:
        if tc.act_mode is Mode.STATIC:
            student, metrics = calibrate_then_train_static(
                tc, task, teacher=teacher, abort_checkpoint=abort_path, on_epoch=done.append)
        else:
            student, metrics = run_qat(tc, task, teacher=teacher, abort_checkpoint=abort_path,
                                       on_epoch=done.append)
    except TrainingAborted as exc:
        partial = RunMetrics(tc.schedule.name, teacher.layer_ids(), done)
        write_metrics_csv(metrics_path, partial, cfg.output["record_wall_time"])
        raise RunFailed(str(exc), [metrics_path, abort_path], exc.snapshot) from exc
    write_metrics_csv(metrics_path, metrics, cfg.output["record_wall_time"])
    ckpt = os.path.join(out, "student.fqat")
    save_checkpoint(student, ckpt)
    written = [metrics_path, ckpt]
    if metrics.calibration is not None:
        path = os.path.join(out, "calibration.csv")
        write_calibration_csv(path, student, metrics.calibration)
        written.append(path)
    log.info("final val loss %.6g", metrics.final_val_loss)
    return written


def cmd_sweep_bits(cfg: ExperimentConfig, out: str, bits=None) -> List[str]:
    bits = tuple(bits or cfg.sweep["bits"])
    base = cfg.synthetic_task()
    per_seed = []
    for seed in cfg.sweep_seeds():
        task = base.with_seed(seed)
        per_seed.append([loss for _, loss in bit_sweep(
            task.build_teacher(), task, bits, act_bits=cfg.quant["act_bits"],
            validation_fraction=cfg.trainer["validation_fraction"], batch_size=cfg.trainer["batch_size"])])
    table = list(zip(bits, np.mean(per_seed, axis=0).tolist()))
    path = os.path.join(out, "sweep.csv")
    write_sweep_csv(path, table)
    return [path]


def cmd_compare_schedules(cfg: ExperimentConfig, out: str) -> List[str]:
    comparison = compare_schedules(cfg.synthetic_task(), budget=cfg.schedule["epochs"],
                                   seeds=cfg.compare["seeds"], config=cfg.trainer_config(),
                                   workers=cfg.compare["workers"])
    for name, med in comparison.medians().items():
        log.info("%s median final val loss %.6g", name, med)
    return write_comparison(out, comparison)


def cmd_calibrate(cfg: ExperimentConfig, out: str) -> List[str]:
    task = cfg.synthetic_task()
    teacher = task.build_teacher()
    stats = calibrate_task(teacher, task, cfg.trainer_config())
    path = os.path.join(out, "calibration.csv")
    write_calibration_csv(path, teacher, stats)
    return [path]


def cmd_outlier_report(cfg: ExperimentConfig, out: str, model: Optional[ToyModel] = None) -> List[str]:
    task = cfg.synthetic_task()
    model = model if model is not None else task.build_teacher()
    for p in model.parameters():
        p.requires_grad = False
    n, size = cfg.report["batches"], cfg.report["batch_size"]
    if cfg.report["constant_input"] is not None:
        x = np.full((n * size, task.seq_len, model.dims.d_model), cfg.report["constant_input"])
    else:
        x = task.inputs()[: n * size]
    stats = observe_activations(model, [x[i:i + size] for i in range(0, len(x), size)],
                                k_sigma=cfg.quant["k_sigma"])
    for tag, s in tag_summary(model, stats).items():
        log.info("%s outlier fraction %.6g", tag, s["outlier_fraction"])
    return list(write_outlier_report(out, model, stats))


# -- argument parsing and dispatch --

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fraqat", description="Fractional-bit QAT experiments on toy models.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, metavar="PATH", help="experiment config file")
        p.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        return p

    add("train", "distill a quantized student down the precision schedule")
    add("sweep-bits", "untrained distillation loss per weight width").add_argument(
        "--bits", type=_bits_arg, help="comma-separated widths (default: the config grid)")
    add("compare-schedules", "fractional vs integer vs simple schedules on one budget")
    add("calibrate", "fit static activation ranges on the teacher")
    add("outlier-report", "per-layer and per-tag activation outlier fractions").add_argument(
        "--checkpoint", metavar="PATH", help="model checkpoint (default: the task's teacher)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _apply_seed(load_config(args.config), args.seed)
        model = None
        if args.command == "outlier-report" and args.checkpoint:
            model = load_checkpoint(args.checkpoint)
    except (ConfigError, ScheduleError, CheckpointError, QuantizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.dry_run:
        print(resolved_text(cfg))
        print("\n".join("# " + line for line in _plan(args.command, cfg, args)))
        return EXIT_OK

    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
        resolved = os.path.join(out, "resolved.cfg")
        atomic_write_text(resolved, resolved_text(cfg))
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    commands = {
        "train": lambda: cmd_train(cfg, out),
        "sweep-bits": lambda: cmd_sweep_bits(cfg, out, args.bits),
        "compare-schedules": lambda: cmd_compare_schedules(cfg, out),
        "calibrate": lambda: cmd_calibrate(cfg, out),
        "outlier-report": lambda: cmd_outlier_report(cfg, out, model),
    }
    try:
        written = commands[args.command]()
    except RunFailed as exc:
        write_status(out, "aborted", args.command, [resolved] + exc.artifacts, exc.detail)
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CalibrationError, CheckpointError, FloatingPointError, OSError, ValueError) as exc:
        write_status(out, "failed", args.command, [resolved], {"error": str(exc)})
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_status(out, "ok", args.command, [resolved] + written)
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
