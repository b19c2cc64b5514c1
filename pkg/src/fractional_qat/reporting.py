"""CSV exports and the run status sidecar.

Floats are written with ``repr`` so a reparse returns the exact values.
All files go through a temp-file-then-rename write.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .checkpoint import atomic_write_bytes
from .layers import ToyModel, tag_summary
from .quant import CalibrationStats
from .trainer import EpochRecord, RunMetrics, ScheduleComparison

METRICS_HEADER = ("epoch", "stage_bits", "train_loss", "val_loss", "wall_time_s")
OUTLIER_PREFIX = "outlier:"


class CSVFormatError(ValueError):
    pass


def _num(x) -> str:
    return repr(float(x)) if not isinstance(x, int) else str(x)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v for v in row])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_csv(path: str) -> Tuple[List[str], List[List[str]]]:
    """Header and rows; every row must have the header's width."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise CSVFormatError(f"{path}:{i}: expected {len(header)} columns, found {len(row)}")
    return header, body


def _float(text: str, where: str, allow_non_finite: bool = False) -> float:
    try:
        value = float(text)
    except ValueError:
        raise CSVFormatError(f"{where}: not a number: {text!r}") from None
    if not allow_non_finite and not math.isfinite(value):
        raise CSVFormatError(f"{where}: non-finite value {text!r}")
    return value


# -- per-epoch metrics --

def write_metrics_csv(path: str, metrics: RunMetrics, record_wall_time: bool = False) -> None:
    """One row per epoch. Wall time is written as 0.0 unless requested, keeping reruns byte-identical."""
    with_outliers = any(r.outliers for r in metrics.records)
    header = list(METRICS_HEADER)
    if with_outliers:
        header += [OUTLIER_PREFIX + name for name in metrics.layer_ids]
    rows = []
    for r in metrics.records:
        row = [r.epoch, float(r.stage_bits), r.train_loss, r.val_loss, r.wall_time if record_wall_time else 0.0]
        if with_outliers:
            if len(r.outliers) != len(metrics.layer_ids):
                raise ValueError(f"epoch {r.epoch}: outlier snapshot width differs from layer count")
            row += list(r.outliers)
        rows.append(row)
    write_csv(path, header, rows)


def read_metrics_csv(path: str, schedule_name: str = "", allow_non_finite: bool = False) -> RunMetrics:
    header, body = read_csv(path)
    if tuple(header[:len(METRICS_HEADER)]) != METRICS_HEADER:
        raise CSVFormatError(f"{path}:1: header must start with {', '.join(METRICS_HEADER)}")
    extra = header[len(METRICS_HEADER):]
    if any(not h.startswith(OUTLIER_PREFIX) for h in extra):
        raise CSVFormatError(f"{path}:1: unexpected column after {METRICS_HEADER[-1]}")
    layer_ids = [h[len(OUTLIER_PREFIX):] for h in extra]
    records = []
    for i, row in enumerate(body, start=2):
        where = f"{path}:{i}"
        try:
            epoch = int(row[0])
        except ValueError:
            raise CSVFormatError(f"{where}: epoch is not an integer") from None
        nums = [_float(v, where, allow_non_finite) for v in row[1:]]
        records.append(EpochRecord(epoch, nums[0], nums[1], nums[2], tuple(nums[4:]), nums[3]))
    return RunMetrics(schedule_name, layer_ids, records)


# -- sweep / comparison --

def write_sweep_csv(path: str, table: Sequence[Tuple[float, float]]) -> None:
    rows = sorted(table, key=lambda r: -r[0])
    write_csv(path, ("bits", "mean_loss"), rows)


def write_curve_csv(path: str, by_seed: Dict[int, RunMetrics]) -> None:
    seeds = sorted(by_seed)
    lengths = {len(by_seed[s].records) for s in seeds}
    if len(lengths) != 1:
        raise ValueError("curves for one schedule must share an epoch count")
    first = by_seed[seeds[0]].records
    rows = [[r.epoch, float(r.stage_bits)] + [by_seed[s].records[i].val_loss for s in seeds]
            for i, r in enumerate(first)]
    write_csv(path, ["epoch", "stage_bits"] + [f"seed_{s}" for s in seeds], rows)


def write_comparison(out_dir: str, comparison: ScheduleComparison) -> List[str]:
    written = []
    for name, by_seed in comparison.runs.items():
        path = os.path.join(out_dir, f"curve_{name}.csv")
        write_curve_csv(path, by_seed)
        written.append(path)
    path = os.path.join(out_dir, "summary.csv")
    write_csv(path, ("schedule", "seed", "final_val_loss"), comparison.summary())
    written.append(path)
    return written


# -- calibration and outlier tables --

CALIBRATION_HEADER = ("layer", "tag", "mean", "std", "sample_count", "value_count", "k_sigma",
                      "inlier_lo", "inlier_hi", "outlier_fraction", "bits", "scale", "offset", "zero_std")


def write_calibration_csv(path: str, model: ToyModel, stats: Dict[str, CalibrationStats]) -> None:
    rows = []
    for lin in model.linears():
        s = stats[lin.name]
        rows.append([lin.name, lin.tag.value, s.mean, s.std, s.sample_count, s.value_count, s.k_sigma,
                     s.inlier_lo, s.inlier_hi, s.outlier_fraction, s.bits, s.scale, s.offset,
                     "true" if s.zero_std else "false"])
    write_csv(path, CALIBRATION_HEADER, rows)


def write_outlier_report(out_dir: str, model: ToyModel, stats: Dict[str, CalibrationStats]) -> Tuple[str, str]:
    """Per-layer table and per-tag aggregate."""
    layers_path = os.path.join(out_dir, "outliers_layers.csv")
    tags_path = os.path.join(out_dir, "outliers_tags.csv")
    write_csv(layers_path, ("layer", "tag", "mean", "std", "outlier_fraction"),
              [[lin.name, lin.tag.value, stats[lin.name].mean, stats[lin.name].std,
                stats[lin.name].outlier_fraction] for lin in model.linears()])
    summary = tag_summary(model, stats)
    write_csv(tags_path, ("tag", "layers", "values", "outlier_fraction"),
              [[tag, s["layers"], s["values"], s["outlier_fraction"]] for tag, s in summary.items()])
    return layers_path, tags_path


# -- status sidecar --

def write_status(out_dir: str, status: str, command: str, artifacts: Sequence[str] = (),
                 detail: Optional[dict] = None) -> str:
    """``status.json`` next to the outputs; ``aborted`` marks partial artifacts."""
    body = {"status": status, "command": command,
            "artifacts": sorted(os.path.basename(a) for a in artifacts)}
    if detail:
        body["detail"] = detail
    path = os.path.join(out_dir, "status.json")
    atomic_write_text(path, json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")
    return path
