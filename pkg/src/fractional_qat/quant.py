"""Fractional bit-width quantizers.

Two quantizer forms are provided. The *narrow* form is symmetric and
scale-only; the *wide* form is affine with an offset equal to the tensor
minimum. Bit widths are real numbers in ``[1, 32]``; the number of
representable levels for a fractional width ``b`` is derived from
``floor(2 ** (b - 1))`` (narrow) or ``floor(2 ** b)`` (wide), so that e.g.
5.5 bits spans ``[-22, 21]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

MIN_BITS = 1.0
MAX_BITS = 32.0

ArrayLike = Union[np.ndarray, Sequence[float], float]


class QuantizationError(ValueError):
    """Invalid quantizer configuration or input."""


class CalibrationError(QuantizationError):
    """Calibration could not be performed or is missing."""


class Form(str, enum.Enum):
    NARROW = "narrow"
    WIDE = "wide"


class Rounding(str, enum.Enum):
    NEAREST_EVEN = "nearest_even"
    FLOOR = "floor"


class Mode(str, enum.Enum):
    DYNAMIC = "dynamic"
    STATIC = "static"


def check_bits(bits: float) -> float:
    bits = float(bits)
    if not (MIN_BITS <= bits <= MAX_BITS) or math.isnan(bits):
        raise QuantizationError(f"bits must lie in [{MIN_BITS:g}, {MAX_BITS:g}], got {bits!r}")
    return bits


def levels(bits: float) -> tuple[int, int, int]:
    """Signed level range ``(q_min, q_max, count)`` for a (possibly fractional) width.

    >>> levels(5.5)
    (-22, 21, 44)
    """
    bits = check_bits(bits)
    half = math.floor(2.0 ** (bits - 1.0))
    return -half, half - 1, 2 * half


def wide_levels(bits: float) -> int:
    """Number of unsigned levels ``L = floor(2 ** bits)`` for the wide form."""
    return math.floor(2.0 ** check_bits(bits))


@dataclass(frozen=True)
class QuantSpec:
    """Everything a quantize call needs to know.

    ``axis=None`` is per-tensor granularity; an integer selects per-channel
    scaling along that axis (dynamic mode only). Static mode carries a fixed
    ``scale`` (and ``offset`` for the wide form).
    """

    bits: float = 8.0
    form: Form = Form.NARROW
    rounding: Rounding = Rounding.NEAREST_EVEN
    mode: Mode = Mode.DYNAMIC
    axis: Optional[int] = None
    scale: Optional[float] = None
    offset: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "bits", check_bits(self.bits))
        object.__setattr__(self, "form", Form(self.form))
        object.__setattr__(self, "rounding", Rounding(self.rounding))
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.STATIC:
            if self.scale is None:
                raise QuantizationError("static QuantSpec requires a scale")
            if not (float(self.scale) > 0.0) or not math.isfinite(self.scale):
                raise QuantizationError(f"scale must be finite and > 0, got {self.scale!r}")
            if self.axis is not None:
                raise QuantizationError("static quantization is per-tensor only")
            offset = 0.0 if self.offset is None else float(self.offset)
            if self.form is Form.NARROW and offset != 0.0:
                raise QuantizationError("narrow form has no offset")
            object.__setattr__(self, "scale", float(self.scale))
            object.__setattr__(self, "offset", offset)
        elif self.scale is not None or self.offset is not None:
            raise QuantizationError("dynamic QuantSpec must not carry static parameters")

    def with_bits(self, bits: float) -> "QuantSpec":
        return replace(self, bits=bits)

    def as_static(self, scale: float, offset: float = 0.0) -> "QuantSpec":
        return replace(self, mode=Mode.STATIC, axis=None, scale=scale, offset=offset)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "form": self.form.value,
            "rounding": self.rounding.value,
            "mode": self.mode.value,
            "axis": self.axis,
            "scale": self.scale,
            "offset": self.offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(**d)


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes together with the scale (and offset) that maps them back."""

    codes: np.ndarray
    scale: Union[float, np.ndarray]
    offset: Union[float, np.ndarray]
    spec: QuantSpec
    shape: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(self.codes.shape))
        if np.any(np.asarray(self.scale) <= 0):
            raise QuantizationError("scale must be positive")
        self.codes.setflags(write=False)

    def code_range(self) -> tuple[int, int]:
        return code_range(self.spec)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def code_range(spec: QuantSpec) -> tuple[int, int]:
    if spec.form is Form.NARROW:
        q_min, q_max, _ = levels(spec.bits)
        return q_min, q_max
    return 0, wide_levels(spec.bits) - 1


def _round(u: np.ndarray, rounding: Rounding) -> np.ndarray:
    if rounding is Rounding.NEAREST_EVEN:
        return np.rint(u)
    return np.floor(u)


def _reduce_axes(ndim: int, axis: Optional[int]):
    if axis is None:
        return None
    axis = axis % ndim
    return tuple(i for i in range(ndim) if i != axis)


def _as_array(W: ArrayLike) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise QuantizationError("cannot quantize non-finite values")
    return W


def _narrow_scale(W: np.ndarray, spec: QuantSpec) -> np.ndarray:
    if spec.mode is Mode.STATIC:
        return np.float64(spec.scale)
    _, q_max, _ = levels(spec.bits)
    # At widths below ~1.58 bits q_max is 0; fall back to a unit divisor.
    divisor = max(q_max, 1)
    peak = np.max(np.abs(W), axis=_reduce_axes(W.ndim, spec.axis), keepdims=spec.axis is not None)
    return np.where(peak > 0, peak / divisor, 1.0)


def _wide_params(W: np.ndarray, spec: QuantSpec):
    if spec.mode is Mode.STATIC:
        return np.float64(spec.scale), np.float64(spec.offset), None
    axes = _reduce_axes(W.ndim, spec.axis)
    keep = spec.axis is not None
    lo = np.min(W, axis=axes, keepdims=keep)
    hi = np.max(W, axis=axes, keepdims=keep)
    span = hi - lo
    L = wide_levels(spec.bits)
    scale = np.where(span > 0, span / L, 1.0)
    return scale, lo, span


def _scalar(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def code_coordinates(W: ArrayLike, spec: QuantSpec):
    """Real-valued, unrounded code positions plus the ``(scale, offset)`` used.

    The quantized codes are ``clip(round(u))``; exposing ``u`` lets callers
    build straight-through masks from the same arithmetic.
    """
    W = _as_array(W)
    if spec.form is Form.NARROW:
        scale = _narrow_scale(W, spec)
        return W / scale, scale, np.float64(0.0)
    scale, offset, span = _wide_params(W, spec)
    if span is None:
        u = (W - offset) / scale
    else:
        L = wide_levels(spec.bits)
        safe = np.where(span > 0, span, 1.0)
        u = np.where(span > 0, L * (W - offset) / safe, 0.0)
    return u, scale, offset


def quantize(W: ArrayLike, spec: QuantSpec) -> QuantizedTensor:
    u, scale, offset = code_coordinates(W, spec)
    lo, hi = code_range(spec)
    codes = np.clip(_round(u, spec.rounding), lo, hi).astype(np.int64)
    return QuantizedTensor(codes=codes, scale=_scalar(scale), offset=_scalar(offset), spec=spec)


def quantize_narrow(W: ArrayLike, spec: QuantSpec) -> QuantizedTensor:
    """Symmetric quantization, ``codes = clip(round(W / s))`` with ``s = max|W| / q_max``.

    An all-zero tensor (dynamic mode) yields zero codes and ``scale = 1``.
    """
    if spec.form is not Form.NARROW:
        raise QuantizationError("quantize_narrow needs a narrow-form spec")
    return quantize(W, spec)


def quantize_wide(W: ArrayLike, spec: QuantSpec) -> QuantizedTensor:
    """Affine quantization onto ``[0, L-1]`` with ``offset = min W``.

    ``W == max W`` lands on code ``L`` under the raw formula and is clamped
    to ``L - 1``. A constant tensor gets zero codes, ``scale = 1``.
    """
    if spec.form is not Form.WIDE:
        raise QuantizationError("quantize_wide needs a wide-form spec")
    return quantize(W, spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    out = q.codes * np.asarray(q.scale, dtype=np.float64)
    if q.spec.form is Form.WIDE:
        out = out + q.offset
    return out


def fake_quant(W: ArrayLike, spec: QuantSpec) -> np.ndarray:
    """Quantize then dequantize, staying in floating point."""
    return dequantize(quantize(W, spec))


def ste_mask(u: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Where the clipped straight-through estimator lets gradient pass.

    ``u`` are code coordinates from :func:`code_coordinates`. The real range
    of the narrow form is ``[q_min, q_max]`` and of the wide form ``[0, L]``
    (i.e. ``[w_min, w_max]``); half a bin of slack absorbs float error.
    """
    if spec.form is Form.NARROW:
        q_min, q_max, _ = levels(spec.bits)
        return (u >= q_min - 0.5) & (u <= q_max + 0.5)
    L = wide_levels(spec.bits)
    return (u >= -0.5) & (u <= L + 0.5)


ACCUMULATOR_MAX = np.iinfo(np.int64).max


def factorized_matmul(xq: QuantizedTensor, Wq: QuantizedTensor) -> np.ndarray:
    """``x_b W_b`` as one float scale product times an exact integer matmul.

    Both operands must be per-tensor narrow-form. The int64 accumulator is
    checked against the worst case ``m * |q_min(b_x)| * |q_min(b_W)|``
    before multiplying.
    """
    for name, q in (("x", xq), ("W", Wq)):
        if q.spec.form is not Form.NARROW:
            raise QuantizationError(f"{name} must be narrow-form (offset-free)")
        if np.ndim(q.scale) != 0:
            raise QuantizationError(f"{name} must be quantized per-tensor")
    cx, cw = xq.codes, Wq.codes
    if cx.ndim < 1 or cw.ndim != 2 or cx.shape[-1] != cw.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {cx.shape} x {cw.shape}")
    m = cw.shape[0]
    bound = m * (-levels(xq.spec.bits)[0]) * (-levels(Wq.spec.bits)[0])
    if bound > ACCUMULATOR_MAX:
        raise OverflowError(
            f"int64 accumulator too narrow: {m} * q_x * q_W = {bound} > {ACCUMULATOR_MAX}"
        )
    acc = np.matmul(cx, cw)
    return (float(xq.scale) * float(Wq.scale)) * acc.astype(np.float64)


@dataclass(frozen=True)
class CalibrationStats:
    """Population statistics of observed values and the derived inlier range."""

    mean: float
    std: float
    sample_count: int
    value_count: int
    k_sigma: float
    inlier_lo: float
    inlier_hi: float
    outlier_fraction: float
    bits: float = 8.0
    scale: float = 1.0
    offset: float = 0.0
    zero_std: bool = False

    @property
    def outlier_count(self) -> int:
        return int(round(self.outlier_fraction * self.value_count))

    def static_spec(self, bits: Optional[float] = None) -> QuantSpec:
        """Wide-form static spec spanning the inlier range."""
        if bits is None or bits == self.bits:
            scale = self.scale
        elif self.zero_std:
            scale = 1.0
        else:
            scale = (self.inlier_hi - self.inlier_lo) / wide_levels(bits)
        return QuantSpec(
            bits=self.bits if bits is None else bits,
            form=Form.WIDE,
            mode=Mode.STATIC,
            scale=scale,
            offset=self.offset,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def calibrate_static(samples, k_sigma: float = 3.0, bits: float = 8.0) -> CalibrationStats:
    """Fix a static wide-form range from ``mean +/- k_sigma * std``.

    Statistics are pooled over every element of every sample (population
    std). A zero std gives ``scale = 1`` and sets ``zero_std``.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise CalibrationError(f"calibration needs at least 2 samples, got {len(samples)}")
    if not k_sigma > 0:
        raise CalibrationError(f"k_sigma must be > 0, got {k_sigma!r}")
    flat = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in samples])
    if flat.size == 0:
        raise CalibrationError("calibration samples are empty")
    if not np.all(np.isfinite(flat)):
        raise CalibrationError("calibration samples contain non-finite values")
    mean = float(flat.mean())
    std = float(flat.std())
    lo = mean - k_sigma * std
    hi = mean + k_sigma * std
    outliers = int(np.count_nonzero((flat < lo) | (flat > hi)))
    zero_std = std == 0.0
    scale = 1.0 if zero_std else (hi - lo) / wide_levels(bits)
    return CalibrationStats(
        mean=mean,
        std=std,
        sample_count=len(samples),
        value_count=int(flat.size),
        k_sigma=float(k_sigma),
        inlier_lo=lo,
        inlier_hi=hi,
        outlier_fraction=outliers / flat.size,
        bits=float(bits),
        scale=scale,
        offset=lo,
        zero_std=zero_std,
    )
