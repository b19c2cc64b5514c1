"""Precision schedules: ordered (bits, epochs) stages with strictly decreasing bits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

from .quant import MAX_BITS, MIN_BITS

FRACTIONAL_STAGES = ((8, 1), (7, 1), (6, 1), (5.5, 1), (5, 1), (4.75, 2), (4.5, 2), (4.25, 2), (4, 14))
INTEGER_BITS = (8, 7, 6, 5, 4)
SIMPLE_BITS = (16, 8, 4)
DEFAULT_TARGET = 4.0


class ScheduleError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid precision schedule: " + "; ".join(self.problems))


@dataclass(frozen=True)
class PrecisionSchedule:
    stages: Tuple[Tuple[float, int], ...]
    name: str = "custom"

    def __post_init__(self):
        stages = tuple((float(b), int(e)) for b, e in self.stages)
        object.__setattr__(self, "stages", stages)

    @property
    def bits(self) -> List[float]:
        return [b for b, _ in self.stages]

    @property
    def total_epochs(self) -> int:
        return sum(e for _, e in self.stages)

    @property
    def target_bits(self) -> float:
        return self.stages[-1][0]

    def epoch_bits(self) -> List[float]:
        """Stage width for every epoch, in order."""
        return [b for b, e in self.stages for _ in range(e)]

    def bits_at(self, epoch: int) -> float:
        per_epoch = self.epoch_bits()
        if not 0 <= epoch < len(per_epoch):
            raise IndexError(f"epoch {epoch} outside schedule of {len(per_epoch)} epochs")
        return per_epoch[epoch]

    def validate(self, target_bits: Optional[float] = None) -> "PrecisionSchedule":
        validate(self, target_bits)
        return self

    def to_config(self) -> str:
        """The ``stages = ...`` value for the experiment config."""
        return json.dumps([[_num(b), e] for b, e in self.stages])

    @classmethod
    def parse(cls, text: str, name: str = "custom") -> "PrecisionSchedule":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ScheduleError([f"stages is not a [[bits, epochs], ...] list: {exc.msg}"]) from None
        if not isinstance(raw, list) or not all(
            isinstance(s, list) and len(s) == 2 and all(isinstance(v, (int, float)) for v in s) for s in raw
        ):
            raise ScheduleError(["stages must be a list of [bits, epochs] pairs"])
        if any(isinstance(e, float) and not float(e).is_integer() for _, e in raw):
            raise ScheduleError(["epochs must be integers"])
        return cls(tuple((b, e) for b, e in raw), name=name)


def _num(b: float):
    return int(b) if float(b).is_integer() else b


def validate(s: PrecisionSchedule, target_bits: Optional[float] = None):
    """Raise :class:`ScheduleError` listing every violated invariant."""
    problems = []
    if not s.stages:
        problems.append("schedule has no stages")
    for i, (b, e) in enumerate(s.stages):
        if not MIN_BITS <= b <= MAX_BITS:
            problems.append(f"stage {i}: bits {b:g} outside [{MIN_BITS:g}, {MAX_BITS:g}]")
        if e <= 0:
            problems.append(f"stage {i}: zero epochs" if e == 0 else f"stage {i}: negative epochs ({e})")
    for i in range(1, len(s.stages)):
        prev, cur = s.stages[i - 1][0], s.stages[i][0]
        if cur >= prev:
            problems.append(f"stage {i}: bits not strictly decreasing ({prev:g} -> {cur:g})")
    if s.stages and target_bits is not None and s.target_bits != target_bits:
        problems.append(f"final stage has {s.target_bits:g} bits, expected target {target_bits:g}")
    if problems:
        raise ScheduleError(problems)


def _budgeted(bits: Iterable[float], total_epochs: int, name: str) -> PrecisionSchedule:
    bits = list(bits)
    if total_epochs < len(bits):
        raise ScheduleError([f"{name} schedule needs at least {len(bits)} epochs, got {total_epochs}"])
    stages = [(b, 1) for b in bits[:-1]] + [(bits[-1], total_epochs - (len(bits) - 1))]
    return PrecisionSchedule(tuple(stages), name=name).validate()


def builtin_fractional(total_epochs: int = 25) -> PrecisionSchedule:
    """8, 7, 6, 5.5, 5, 4.75, 4.5, 4.25, 4 with 14 epochs at 4 bits (25 total).

    A different budget only changes the final stage's epoch count.
    """
    extra = total_epochs - 25
    if 14 + extra < 1:
        raise ScheduleError([f"fractional schedule needs at least 12 epochs, got {total_epochs}"])
    stages = FRACTIONAL_STAGES[:-1] + ((4, 14 + extra),)
    return PrecisionSchedule(stages, name="fractional").validate()


def builtin_integer(total_epochs: int = 25) -> PrecisionSchedule:
    """8, 7, 6, 5, 4: one epoch per intermediate stage, the rest at 4 bits."""
    return _budgeted(INTEGER_BITS, total_epochs, "integer")


def builtin_simple(total_epochs: int = 25) -> PrecisionSchedule:
    """16, 8, 4: one epoch each at 16 and 8, the rest at 4 bits."""
    return _budgeted(SIMPLE_BITS, total_epochs, "simple")


BUILTINS = {"fractional": builtin_fractional, "integer": builtin_integer, "simple": builtin_simple}


def builtin(name: str, total_epochs: int = 25) -> PrecisionSchedule:
    try:
        return BUILTINS[name](total_epochs)
    except KeyError:
        raise ScheduleError([f"unknown schedule {name!r}; choose from {sorted(BUILTINS)}"]) from None
