"""Fractional bit-width quantization-aware training on toy networks."""

from .quant import (
    CalibrationError,
    CalibrationStats,
    Form,
    Mode,
    QuantizationError,
    QuantizedTensor,
    QuantSpec,
    Rounding,
    calibrate_static,
    dequantize,
    factorized_matmul,
    fake_quant,
    levels,
    quantize,
    quantize_narrow,
    quantize_wide,
    wide_levels,
)
from .schedule import (
    PrecisionSchedule,
    ScheduleError,
    builtin_fractional,
    builtin_integer,
    builtin_simple,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "CalibrationStats",
    "Form",
    "Mode",
    "PrecisionSchedule",
    "QuantSpec",
    "QuantizationError",
    "QuantizedTensor",
    "Rounding",
    "ScheduleError",
    "builtin_fractional",
    "builtin_integer",
    "builtin_simple",
    "calibrate_static",
    "dequantize",
    "factorized_matmul",
    "fake_quant",
    "levels",
    "quantize",
    "quantize_narrow",
    "quantize_wide",
    "wide_levels",
]
