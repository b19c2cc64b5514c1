"""Experiment configuration: a sectioned ``key = value`` file with a fixed schema.

Every key has a type and a default. Parsing rejects unknown sections and
keys, and every diagnostic points at ``path:line``. ``resolved_text`` writes
back a complete file (all keys, floats in shortest round-trip form) that
parses to an equal config.
"""

from __future__ import annotations

import configparser
import json
import re
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Optional, Tuple

from .layers import LayerSelection, ModelDims, Selection
from .quant import Form, Mode, Rounding, check_bits
from .schedule import BUILTINS, PrecisionSchedule, ScheduleError, builtin
from .trainer import SWEEP_GRID, SyntheticTask, TrainerConfig


class ConfigError(ValueError):
    """Invalid configuration, with the offending ``source:line`` when known."""

    def __init__(self, message: str, source: str = "<config>", line: Optional[int] = None):
        self.source, self.line, self.message = source, line, message
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# -- value codecs: parse(text) -> value and format(value) -> text --

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def _optional(parse: Callable) -> Callable:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return inner


def _list(parse: Callable) -> Callable:
    def inner(text: str):
        items = [t for t in re.split(r"[,\s]+", text.strip()) if t]
        return tuple(parse(t) for t in items)
    return inner


def _choice(enum_cls) -> Callable:
    def inner(text: str):
        try:
            return enum_cls(text.strip())
        except ValueError:
            options = ", ".join(e.value for e in enum_cls)
            raise ValueError(f"expected one of {options}, got {text.strip()!r}") from None
    return inner


def _name(text: str) -> str:
    name = text.strip()
    if name not in BUILTINS and name != "custom":
        raise ValueError(f"expected one of {', '.join(BUILTINS)}, custom; got {name!r}")
    return name


def _stages(text: str):
    if not text.strip() or text.strip().lower() == "none":
        return None
    return PrecisionSchedule.parse(text).stages


def _fmt_stages(stages) -> str:
    return "none" if stages is None else json.dumps([[b, e] for b, e in stages])


_DIMS = ModelDims()

# section -> key -> (parser, default, formatter or None)
SCHEMA: Dict[str, Dict[str, Tuple[Callable, Any, Optional[Callable]]]] = {
    "task": {
        "seed": (int, 1234, None),
        "n_samples": (int, 1024, None),
        "seq_len": (int, 8, None),
        "d_model": (int, _DIMS.d_model, None),
        "n_blocks": (int, _DIMS.n_blocks, None),
        "ff_mult": (int, _DIMS.ff_mult, None),
        "d_out": (int, _DIMS.d_out, None),
        "outlier_prob": (float, 0.01, None),
        "outlier_scale": (float, 8.0, None),
    },
    "quant": {
        "weight_form": (_choice(Form), Form.NARROW, None),
        "rounding": (_choice(Rounding), Rounding.NEAREST_EVEN, None),
        "act_mode": (_choice(Mode), Mode.DYNAMIC, None),
        "act_bits": (float, 8.0, None),
        "last_layer_act_bits": (_optional(float), None, None),
        "k_sigma": (float, 3.0, None),
        "calibration_samples": (int, 100, None),
    },
    "schedule": {
        "name": (_name, "fractional", None),
        "epochs": (int, 25, None),
        "stages": (_stages, None, _fmt_stages),
    },
    "trainer": {
        "learning_rate": (float, 1e-3, None),
        "batch_size": (int, 64, None),
        "selection": (_choice(Selection), Selection.ALL, None),
        "weight_decay": (float, 0.0, None),
        "beta1": (float, 0.9, None),
        "beta2": (float, 0.999, None),
        "eps": (float, 1e-8, None),
        "validation_fraction": (float, 0.025, None),
        "record_outliers": (_bool, True, None),
    },
    "sweep": {
        "bits": (_list(float), tuple(float(b) for b in SWEEP_GRID), None),
        "seeds": (_list(int), (), None),
    },
    "compare": {
        "seeds": (_list(int), (1234, 1235, 1236, 1237, 1238), None),
        "workers": (int, 1, None),
    },
    "report": {
        "batches": (int, 10, None),
        "batch_size": (int, 16, None),
        "constant_input": (_optional(float), None, None),
    },
    "output": {
        "record_wall_time": (_bool, False, None),
    },
}


def _defaults(section: str) -> Dict[str, Any]:
    return {k: spec[1] for k, spec in SCHEMA[section].items()}


@dataclass(frozen=True)
class ExperimentConfig:
    """All settings for one CLI invocation, grouped by file section."""

    task: Dict[str, Any] = field(default_factory=lambda: _defaults("task"))
    quant: Dict[str, Any] = field(default_factory=lambda: _defaults("quant"))
    schedule: Dict[str, Any] = field(default_factory=lambda: _defaults("schedule"))
    trainer: Dict[str, Any] = field(default_factory=lambda: _defaults("trainer"))
    sweep: Dict[str, Any] = field(default_factory=lambda: _defaults("sweep"))
    compare: Dict[str, Any] = field(default_factory=lambda: _defaults("compare"))
    report: Dict[str, Any] = field(default_factory=lambda: _defaults("report"))
    output: Dict[str, Any] = field(default_factory=lambda: _defaults("output"))

    @property
    def seed(self) -> int:
        return self.task["seed"]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, task={**self.task, "seed": int(seed)})

    def synthetic_task(self) -> SyntheticTask:
        t = self.task
        dims = ModelDims(t["d_model"], t["n_blocks"], t["ff_mult"], t["d_out"])
        return SyntheticTask(seed=t["seed"], n_samples=t["n_samples"], seq_len=t["seq_len"], dims=dims,
                             outlier_prob=t["outlier_prob"], outlier_scale=t["outlier_scale"])

    def precision_schedule(self) -> PrecisionSchedule:
        s = self.schedule
        if s["name"] == "custom":
            return PrecisionSchedule(tuple(s["stages"]), name="custom")
        return builtin(s["name"], s["epochs"])

    def trainer_config(self) -> TrainerConfig:
        q, t = self.quant, self.trainer
        return TrainerConfig(
            learning_rate=t["learning_rate"], batch_size=t["batch_size"], seed=self.seed,
            schedule=self.precision_schedule(), selection=LayerSelection(t["selection"]),
            act_mode=q["act_mode"], weight_decay=t["weight_decay"], betas=(t["beta1"], t["beta2"]),
            eps=t["eps"], validation_fraction=t["validation_fraction"], act_bits=q["act_bits"],
            last_layer_act_bits=q["last_layer_act_bits"], weight_form=q["weight_form"],
            rounding=q["rounding"], k_sigma=q["k_sigma"], calibration_samples=q["calibration_samples"],
            record_outliers=t["record_outliers"],
        )

    def sweep_seeds(self) -> Tuple[int, ...]:
        return self.sweep["seeds"] or (self.seed,)


def _line_index(text: str) -> Dict[Tuple[Optional[str], Optional[str]], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    index: Dict[Tuple[Optional[str], Optional[str]], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]*)\]", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), no)
            continue
        if raw[:1].isspace():
            continue  # continuation line
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        index.setdefault((section, key), no)
    return index


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and fully validate a config file's text."""
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="\0unused")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], source, getattr(exc, "lineno", None)) from None

    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", source, lines.get((section, None)))
    for section, keys in SCHEMA.items():
        got = _defaults(section)
        if parser.has_section(section):
            for key, raw in parser.items(section):
                line = lines.get((section, key))
                if key not in keys:
                    raise ConfigError(f"unknown key {key!r} in [{section}]", source, line)
                try:
                    got[key] = keys[key][0](raw)
                except (ValueError, ScheduleError) as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}", source, line) from None
        values[section] = got
    cfg = ExperimentConfig(**values)
    _validate(cfg, source, lines)
    return cfg


def _validate(cfg: ExperimentConfig, source: str, lines) -> None:
    def fail(section, key, msg):
        raise ConfigError(f"[{section}] {key}: {msg}", source, lines.get((section, key)))

    for key in ("n_samples", "seq_len", "d_model", "n_blocks", "ff_mult", "d_out"):
        if cfg.task[key] < 1:
            fail("task", key, "must be a positive integer")
    if not 0.0 <= cfg.task["outlier_prob"] <= 1.0:
        fail("task", "outlier_prob", "must lie in [0, 1]")
    for key in ("act_bits", "last_layer_act_bits"):
        if cfg.quant[key] is not None:
            try:
                check_bits(cfg.quant[key])
            except ValueError as exc:
                fail("quant", key, str(exc))
    if cfg.quant["k_sigma"] <= 0:
        fail("quant", "k_sigma", "must be positive")
    if cfg.quant["calibration_samples"] < 2:
        fail("quant", "calibration_samples", "needs at least 2 samples")
    if cfg.schedule["name"] == "custom" and cfg.schedule["stages"] is None:
        fail("schedule", "stages", "a custom schedule needs a stages list")
    if cfg.schedule["name"] != "custom" and cfg.schedule["stages"] is not None:
        fail("schedule", "stages", "only valid with name = custom")
    try:
        cfg.precision_schedule().validate()
    except ScheduleError as exc:
        key = "stages" if cfg.schedule["name"] == "custom" else "epochs"
        fail("schedule", key, str(exc))
    for key in ("beta1", "beta2"):
        if not 0.0 <= cfg.trainer[key] < 1.0:
            fail("trainer", key, "must lie in [0, 1)")
    if cfg.trainer["eps"] <= 0:
        fail("trainer", "eps", "must be positive")
    try:
        cfg.trainer_config()
    except ValueError as exc:
        fail("trainer", str(exc).split()[0], str(exc))
    for b in cfg.sweep["bits"]:
        try:
            check_bits(b)
        except ValueError as exc:
            fail("sweep", "bits", str(exc))
    if not cfg.sweep["bits"]:
        fail("sweep", "bits", "must not be empty")
    if not cfg.compare["seeds"]:
        fail("compare", "seeds", "must not be empty")
    if cfg.compare["workers"] < 1:
        fail("compare", "workers", "must be >= 1")
    for key in ("batches", "batch_size"):
        if cfg.report[key] < 1:
            fail("report", key, "must be a positive integer")
    n = cfg.task["n_samples"]
    if cfg.report["batches"] * cfg.report["batch_size"] > n:
        fail("report", "batches", f"batches x batch_size exceeds the {n} task samples")
    n_train = n - max(2, int(round(cfg.trainer["validation_fraction"] * n)))
    if n_train < 1:
        fail("task", "n_samples", "too few samples for a train/validation split")
    if cfg.quant["act_mode"] is Mode.STATIC and cfg.quant["calibration_samples"] > n_train:
        fail("quant", "calibration_samples", f"exceeds the {n_train} training samples")


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, source=path)


def resolved_text(cfg: ExperimentConfig) -> str:
    """Complete config text; parsing it gives back ``cfg``."""
    out: List[str] = []
    for f in fields(cfg):
        section = f.name
        out.append(f"[{section}]")
        values = getattr(cfg, section)
        for key, (_, _, fmt) in SCHEMA[section].items():
            out.append(f"{key} = {(fmt or _fmt)(values[key])}")
        out.append("")
    return "\n".join(out)
