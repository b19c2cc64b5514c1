"""Teacher-student quantization-aware training down a precision schedule.

A full-precision teacher is frozen. The student starts as a byte copy of
the teacher, is fake-quantized at the first stage's width (activations
stay at 8 bits throughout) and is trained to match the teacher's outputs
under an MSE loss. After each stage the weight width is lowered.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .layers import (
    ACT_BITS,
    LayerSelection,
    ModelDims,
    ToyModel,
    attach_observers,
    detach_observers,
    select_trainable,
    set_bits,
)
from .quant import CalibrationError, CalibrationStats, Form, Mode, Rounding, calibrate_static
from .schedule import PrecisionSchedule, builtin, builtin_fractional
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """A non-finite loss stopped the run; ``snapshot`` says where."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


class Adam:
    """Adam with optional decoupled weight decay.

    Only parameters with ``requires_grad`` and a gradient are touched.
    Updated values are rounded to float32 so parameters stay exactly
    representable in the checkpoint format.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """Apply one update; raises FloatingPointError (and changes nothing) if it would overflow."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        staged = []
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            new = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                new = new - self.lr * self.weight_decay * p.data
            with np.errstate(over="ignore"):
                new = new.astype(np.float32).astype(np.float64)
            if not np.all(np.isfinite(new)):
                self.t -= 1
                raise FloatingPointError("optimizer step left the float32 range")
            staged.append((i, p, m, v, new))
        for i, p, m, v, new in staged:
            self.m[i], self.v[i], p.data = m, v, new


@dataclass(frozen=True)
class SyntheticTask:
    """Random inputs and a random teacher with injected weight outliers.

    A fraction ``outlier_prob`` of every teacher weight matrix is multiplied
    by ``outlier_scale``; without it a random teacher quantizes too easily
    for schedule differences to show.
    """

    seed: int = 1234
    n_samples: int = 1024
    seq_len: int = 8
    dims: ModelDims = ModelDims()
    outlier_prob: float = 0.01
    outlier_scale: float = 8.0

    def with_seed(self, seed: int) -> "SyntheticTask":
        return replace(self, seed=seed)

    def build_teacher(self) -> ToyModel:
        teacher = ToyModel.build(self.dims, seed=self.seed)
        rng = np.random.default_rng([self.seed, 1])
        for lin in teacher.linears():
            w = lin.weight.data.copy()
            hit = rng.random(w.shape) < self.outlier_prob
            w[hit] *= self.outlier_scale
            lin.weight.data = w.astype(np.float32).astype(np.float64)
            lin.set_trainable(False)
        return teacher

    def inputs(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 2])
        x = rng.standard_normal((self.n_samples, self.seq_len, self.dims.d_model))
        return x.astype(np.float32).astype(np.float64)

    def split(self, validation_fraction: float = 0.025) -> Tuple[np.ndarray, np.ndarray]:
        """Deterministic (train, validation) split."""
        if not 0.0 < validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        x = self.inputs()
        perm = np.random.default_rng([self.seed, 3]).permutation(len(x))
        n_val = max(2, int(round(validation_fraction * len(x))))
        return x[perm[n_val:]], x[perm[:n_val]]


@dataclass
class TrainerConfig:
    # Toy-scale defaults; the large-model learning rates do not transfer.
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 1234
    schedule: PrecisionSchedule = field(default_factory=builtin_fractional)
    selection: LayerSelection = field(default_factory=LayerSelection)
    act_mode: Mode = Mode.DYNAMIC
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    validation_fraction: float = 0.025
    act_bits: float = ACT_BITS
    last_layer_act_bits: Optional[float] = None
    weight_form: Form = Form.NARROW
    rounding: Rounding = Rounding.NEAREST_EVEN
    k_sigma: float = 3.0
    calibration_samples: int = 100
    record_outliers: bool = True

    def __post_init__(self):
        self.act_mode = Mode(self.act_mode)
        self.weight_form = Form(self.weight_form)
        self.rounding = Rounding(self.rounding)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        self.schedule.validate()


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage_bits: float
    train_loss: float
    val_loss: float
    outliers: Tuple[float, ...] = ()
    wall_time: float = 0.0


@dataclass
class RunMetrics:
    schedule_name: str
    layer_ids: List[str]
    records: List[EpochRecord] = field(default_factory=list)
    calibration: Optional[Dict[str, CalibrationStats]] = None

    @property
    def final_val_loss(self) -> float:
        return self.records[-1].val_loss

    def val_curve(self) -> List[float]:
        return [r.val_loss for r in self.records]

    def same_values(self, other: "RunMetrics") -> bool:
        """Equality ignoring wall-clock time."""
        strip = lambda rs: [replace(r, wall_time=0.0) for r in rs]  # noqa: E731
        return self.layer_ids == other.layer_ids and strip(self.records) == strip(other.records)


def _batches(n: int, size: int, order: Optional[np.ndarray] = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def distill_step(teacher: ToyModel, student: ToyModel, batch, opt: Adam) -> float:
    """One optimizer update of the student toward the frozen teacher's outputs."""
    x = Tensor(T.as_tensor(batch).data)
    target = T.stop_grad(teacher(x))
    loss = T.mse_loss(student(x), target)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingAborted("non-finite distillation loss", {"loss": value})
    opt.zero_grad()
    if loss.requires_grad:
        T.backward(loss)
    opt.step()
    return value


def evaluate(teacher: ToyModel, student: ToyModel, x: np.ndarray, batch_size: int = 64) -> float:
    """Mean squared teacher/student output gap over ``x`` (no gradients)."""
    total, count = 0.0, 0
    for idx in _batches(len(x), batch_size):
        xb = Tensor(x[idx])
        diff = student(xb).data - teacher(xb).data
        total += float((diff * diff).sum())
        count += diff.size
    return total / count


def _frozen_view(model: ToyModel):
    """Temporarily detach parameters from autograd (evaluation passes)."""
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad = False
    return flags


def _restore(model: ToyModel, flags):
    for p, f in zip(model.parameters(), flags):
        p.requires_grad = f


def outlier_snapshot(model: ToyModel, x: np.ndarray, k_sigma: float = 3.0) -> Tuple[float, ...]:
    flags = _frozen_view(model)
    attach_observers(model)
    try:
        model(Tensor(x))
        return tuple(lin.observer.stats(k_sigma).outlier_fraction for lin in model.linears())
    finally:
        detach_observers(model)
        _restore(model, flags)


def make_student(teacher: ToyModel, config: TrainerConfig, bits: float) -> ToyModel:
    student = teacher.quantized_copy(bits, config.act_bits, config.weight_form, config.rounding)
    if config.last_layer_act_bits is not None:
        student.head.act_spec = student.head.act_spec.with_bits(config.last_layer_act_bits)
    if config.act_mode is Mode.STATIC:
        for lin in student.linears():
            lin.require_static()
    return student


def calibrate_model(model: ToyModel, samples: np.ndarray, k_sigma: float = 3.0,
                    bits: float = ACT_BITS) -> Dict[str, CalibrationStats]:
    """Record every layer's input over ``samples`` and fit 3-sigma static ranges."""
    probe = model.copy()
    for lin in probe.linears():
        lin.set_trainable(False)
    attach_observers(probe)
    probe(Tensor(samples))
    return {lin.name: calibrate_static(lin.observer.samples(), k_sigma, bits) for lin in probe.linears()}


def apply_calibration(student: ToyModel, calibration: Dict[str, CalibrationStats]):
    for lin in student.linears():
        if lin.name not in calibration:
            raise CalibrationError(f"no calibration for layer {lin.name}")
        bits = lin.act_spec.bits if lin.act_spec is not None else ACT_BITS
        lin.calibrate(calibration[lin.name], bits)


def _check_act_bits(student: ToyModel, config: TrainerConfig):
    for lin in student.linears():
        want = config.last_layer_act_bits if (lin is student.head and config.last_layer_act_bits) else config.act_bits
        if lin.act_spec is None or lin.act_spec.bits != want:
            raise AssertionError(f"{lin.name}: activation width drifted from {want:g}")


def run_qat(
    config: TrainerConfig,
    task: SyntheticTask,
    teacher: Optional[ToyModel] = None,
    calibration: Optional[Dict[str, CalibrationStats]] = None,
    abort_checkpoint: Optional[str] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> Tuple[ToyModel, RunMetrics]:
    """Train a quantized student down ``config.schedule``; one record per epoch."""
    teacher = teacher if teacher is not None else task.build_teacher()
    schedule = config.schedule.validate()
    train_x, val_x = task.split(config.validation_fraction)
    student = make_student(teacher, config, schedule.stages[0][0])
    if config.act_mode is Mode.STATIC:
        if calibration is None:
            raise CalibrationError("static activation mode: run a calibration pass before training")
        apply_calibration(student, calibration)
    select_trainable(student, config.selection)
    opt = Adam(student.parameters(), config.learning_rate, config.betas, config.eps, config.weight_decay)
    rng = np.random.default_rng([config.seed, 5])
    metrics = RunMetrics(schedule.name, student.layer_ids(), calibration=calibration)

    epoch = 0
    for bits, n_epochs in schedule.stages:
        set_bits(student, bits)
        _check_act_bits(student, config)
        for _ in range(n_epochs):
            t0 = time.perf_counter()
            losses = []
            order = rng.permutation(len(train_x))
            for step, idx in enumerate(_batches(len(train_x), config.batch_size, order)):
                try:
                    losses.append(distill_step(teacher, student, train_x[idx], opt))
                except (TrainingAborted, FloatingPointError) as exc:
                    snapshot = {"epoch": epoch, "step": step, "stage_bits": bits, "error": str(exc)}
                    if abort_checkpoint:
                        save_checkpoint(student, abort_checkpoint)
                    raise TrainingAborted(f"training aborted at epoch {epoch}, step {step}: {exc}",
                                          snapshot) from exc
            flags = _frozen_view(student)
            try:
                val = evaluate(teacher, student, val_x, config.batch_size)
            finally:
                _restore(student, flags)
            outl = outlier_snapshot(student, val_x, config.k_sigma) if config.record_outliers else ()
            rec = EpochRecord(epoch, bits, float(np.mean(losses)), val, outl, time.perf_counter() - t0)
            metrics.records.append(rec)
            log.debug("epoch %d bits %g train %.6g val %.6g", epoch, bits, rec.train_loss, val)
            if on_epoch is not None:
                on_epoch(rec)
            epoch += 1
    return student, metrics


def calibrate_then_train_static(
    config: TrainerConfig,
    task: SyntheticTask,
    teacher: Optional[ToyModel] = None,
    **kwargs,
) -> Tuple[ToyModel, RunMetrics]:
    """Fix per-layer activation ranges on random training samples, then train."""
    if config.act_mode is not Mode.STATIC:
        raise CalibrationError("calibrate_then_train_static needs act_mode = static")
    teacher = teacher if teacher is not None else task.build_teacher()
    calibration = calibrate_task(teacher, task, config)
    return run_qat(config, task, teacher=teacher, calibration=calibration, **kwargs)


def calibrate_task(teacher: ToyModel, task: SyntheticTask, config: TrainerConfig) -> Dict[str, CalibrationStats]:
    train_x, _ = task.split(config.validation_fraction)
    n = config.calibration_samples
    if n < 2 or n > len(train_x):
        raise CalibrationError(f"calibration_samples must lie in [2, {len(train_x)}], got {n}")
    pick = np.random.default_rng([config.seed, 4]).choice(len(train_x), size=n, replace=False)
    return calibrate_model(teacher, train_x[np.sort(pick)], config.k_sigma, config.act_bits)


SWEEP_GRID = (8, 7, 6, 5.5, 5, 4.75, 4.5, 4.25, 4)


def bit_sweep(teacher: ToyModel, task: SyntheticTask, bits_list: Sequence[float] = SWEEP_GRID,
              act_bits: float = ACT_BITS, validation_fraction: float = 0.025,
              batch_size: int = 64) -> List[Tuple[float, float]]:
    """Distillation loss of an untrained quantized copy at each width.

    Activations sit at ``act_bits``; a 32-bit entry stands for the full
    W32A32 reference, so its activations are at 32 bits as well.
    """
    if not bits_list:
        raise ValueError("bits_list must not be empty")
    _, val_x = task.split(validation_fraction)
    out = []
    for b in bits_list:
        student = teacher.quantized_copy(b, act_bits if b < 32 else 32.0)
        out.append((float(b), evaluate(teacher, student, val_x, batch_size)))
    return out


@dataclass
class ScheduleComparison:
    budget: int
    runs: Dict[str, Dict[int, RunMetrics]]

    def summary(self) -> List[Tuple[str, int, float]]:
        return [(name, seed, m.final_val_loss)
                for name, by_seed in self.runs.items() for seed, m in sorted(by_seed.items())]

    def medians(self) -> Dict[str, float]:
        return {name: float(np.median([m.final_val_loss for m in by_seed.values()]))
                for name, by_seed in self.runs.items()}


def _compare_job(args):
    name, seed, budget, config, task = args
    cfg = replace(config, schedule=builtin(name, budget), seed=seed)
    _, metrics = run_qat(cfg, task.with_seed(seed))
    return name, seed, metrics


def compare_schedules(task: SyntheticTask, budget: int = 25, seeds: Sequence[int] = (1234,),
                      config: Optional[TrainerConfig] = None, names=("fractional", "integer", "simple"),
                      workers: int = 1) -> ScheduleComparison:
    """Train every named schedule for every seed on an identical epoch budget.

    Each seed fixes both the task (teacher, data) and the shuffling. Jobs are
    independent; with ``workers > 1`` they run in separate processes.
    """
    config = config if config is not None else TrainerConfig()
    jobs = [(name, seed, budget, config, task) for seed in seeds for name in names]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_compare_job, jobs))
    else:
        results = [_compare_job(j) for j in jobs]
    runs: Dict[str, Dict[int, RunMetrics]] = {name: {} for name in names}
    for name, seed, metrics in results:
        runs[name][seed] = metrics
    return ScheduleComparison(budget, runs)
