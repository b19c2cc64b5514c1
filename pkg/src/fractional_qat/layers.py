"""Quantization-aware linear layers and the toy transformer student."""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional

import numpy as np

from . import tensor as T
from .quant import (
    CalibrationError,
    CalibrationStats,
    Form,
    Mode,
    QuantSpec,
    Rounding,
    calibrate_static,
    check_bits,
    code_coordinates,
    code_range,
    ste_mask,
)
from .tensor import Tensor

ACT_BITS = 8.0


class Tag(str, enum.Enum):
    FF = "FF"
    ATTN = "Attn"
    OTHER = "Other"


class Selection(str, enum.Enum):
    FF = "FF"
    ATTN = "Attn"
    TF = "TF"
    ALL = "All"


_SELECTED_TAGS = {
    Selection.FF: {Tag.FF},
    Selection.ATTN: {Tag.ATTN},
    Selection.TF: {Tag.FF, Tag.ATTN},
    Selection.ALL: {Tag.FF, Tag.ATTN, Tag.OTHER},
}


def fake_quant_ste(x: Tensor, spec: Optional[QuantSpec]) -> Tensor:
    """Fake-quantize on the graph with a clipped straight-through backward.

    Gradient passes unchanged where the value lies inside the quantizer's
    real range and is zeroed outside it. ``spec=None`` is the identity.
    """
    if spec is None:
        return x
    u, scale, offset = code_coordinates(x.data, spec)
    lo, hi = code_range(spec)
    codes = np.clip(np.rint(u) if spec.rounding is Rounding.NEAREST_EVEN else np.floor(u), lo, hi)
    out = codes * scale
    if spec.form is Form.WIDE:
        out = out + offset
    if not x.requires_grad:
        return Tensor(out)
    mask = ste_mask(u, spec)
    return T.custom(x, out, lambda g: g * mask, "fake_quant")


class ActivationObserver:
    """Records every activation tensor that enters a layer."""

    def __init__(self):
        self.batches: List[np.ndarray] = []

    def record(self, x: np.ndarray):
        self.batches.append(np.array(x, dtype=np.float64))

    def samples(self) -> List[np.ndarray]:
        """Per-sample arrays (split along the leading batch axis)."""
        out = []
        for b in self.batches:
            out.extend(list(b) if b.ndim > 1 else [b])
        return out

    def stats(self, k_sigma: float = 3.0, bits: float = ACT_BITS) -> CalibrationStats:
        return calibrate_static(self.samples(), k_sigma=k_sigma, bits=bits)

    def reset(self):
        self.batches.clear()


def weight_spec(bits: float, form: Form = Form.NARROW, rounding: Rounding = Rounding.NEAREST_EVEN) -> QuantSpec:
    return QuantSpec(bits=bits, form=form, rounding=rounding)


def act_spec(bits: float = ACT_BITS) -> QuantSpec:
    """Wide-form activation spec; dynamic ranges are taken per sample (leading axis)."""
    return QuantSpec(bits=bits, form=Form.WIDE, axis=0)


class QuantLinear:
    """``y = fq(x) @ fq(W) + b`` with weights ``(in, out)`` and a float bias.

    ``weight_spec`` / ``act_spec`` set to ``None`` disable the corresponding
    fake quantization (the full-precision teacher uses this).
    """

    def __init__(
        self,
        weight: np.ndarray,
        bias: Optional[np.ndarray] = None,
        tag: Tag = Tag.OTHER,
        name: str = "linear",
        weight_spec: Optional[QuantSpec] = None,
        act_spec: Optional[QuantSpec] = None,
    ):
        self.weight = Tensor(weight)
        self.bias = Tensor(bias) if bias is not None else None
        self.tag = Tag(tag)
        self.name = name
        self.weight_spec = weight_spec
        self.act_spec = act_spec
        self.act_mode = act_spec.mode if act_spec is not None else Mode.DYNAMIC
        self.observer: Optional[ActivationObserver] = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> List[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    @property
    def trainable(self) -> bool:
        return self.weight.requires_grad

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def require_static(self):
        """Switch activations to static mode; forward fails until calibrated."""
        self.act_mode = Mode.STATIC
        if self.act_spec is not None and self.act_spec.mode is not Mode.STATIC:
            self.act_spec = QuantSpec(bits=self.act_spec.bits, form=self.act_spec.form,
                                      rounding=self.act_spec.rounding)

    def calibrate(self, stats: CalibrationStats, bits: Optional[float] = None):
        bits = bits if bits is not None else (self.act_spec.bits if self.act_spec else ACT_BITS)
        self.act_mode = Mode.STATIC
        self.act_spec = stats.static_spec(bits)

    def __call__(self, x: Tensor) -> Tensor:
        return quant_forward(self, x)

    def __repr__(self):
        return f"QuantLinear({self.name!r}, {self.in_features}->{self.out_features}, tag={self.tag.value})"


def quant_forward(layer: QuantLinear, x: Tensor) -> Tensor:
    """Approximate ``x @ W`` by ``fq_act(x) @ fq_w(W)`` (+ bias)."""
    if x.shape[-1] != layer.in_features:
        raise ValueError(f"{layer.name}: expected input width {layer.in_features}, got {x.shape[-1]}")
    if layer.act_mode is Mode.STATIC and (layer.act_spec is None or layer.act_spec.mode is not Mode.STATIC):
        raise CalibrationError(
            f"{layer.name}: static activation quantization needs calibration; run calibrate first"
        )
    if layer.observer is not None:
        layer.observer.record(x.data)
    xq = fake_quant_ste(x, layer.act_spec)
    wq = fake_quant_ste(layer.weight, layer.weight_spec)
    y = T.matmul(xq, wq)
    if layer.bias is not None:
        y = T.add(y, layer.bias)
    return y


def _to_f32(a: np.ndarray) -> np.ndarray:
    # parameters are kept float32-representable so checkpoints round-trip exactly
    return a.astype(np.float32).astype(np.float64)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int):
    w = rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)
    b = 0.02 * rng.standard_normal(n_out)
    return _to_f32(w), _to_f32(b)


class Block:
    """Pre-norm transformer block: single-head attention then a GELU MLP."""

    def __init__(self, linears: Dict[str, QuantLinear], d_model: int):
        self.q, self.k, self.v, self.o = (linears[n] for n in ("q", "k", "v", "o"))
        self.up, self.down = linears["up"], linears["down"]
        self.d_model = d_model

    def linears(self) -> List[QuantLinear]:
        return [self.q, self.k, self.v, self.o, self.up, self.down]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.layernorm(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.d_model))
        att = T.matmul(T.softmax(scores, axis=-1), v)
        x = T.add(x, self.o(att))
        h = T.layernorm(x)
        return T.add(x, self.down(T.gelu(self.up(h))))


@dataclass(frozen=True)
class ModelDims:
    d_model: int = 64
    n_blocks: int = 2
    ff_mult: int = 4
    d_out: int = 64


class ToyModel:
    """Stack of transformer blocks followed by an output projection.

    Inputs are ``(batch, tokens, d_model)``. Every linear layer is a
    :class:`QuantLinear`; attention projections are tagged ``Attn``, the MLP
    ``FF`` and the final projection ``Other``.
    """

    def __init__(self, blocks: List[Block], head: QuantLinear, dims: ModelDims):
        self.blocks = blocks
        self.head = head
        self.dims = dims

    @classmethod
    def build(
        cls,
        dims: ModelDims = ModelDims(),
        seed: int = 0,
        weight_bits: Optional[float] = None,
        act_bits: Optional[float] = None,
    ) -> "ToyModel":
        """Random init. ``None`` bits means no fake quantization."""
        rng = np.random.default_rng(seed)
        d, hidden = dims.d_model, dims.d_model * dims.ff_mult
        wspec = weight_spec(weight_bits) if weight_bits is not None else None
        aspec = act_spec(act_bits) if act_bits is not None else None
        blocks = []
        for i in range(dims.n_blocks):
            shapes = {"q": (d, d, Tag.ATTN), "k": (d, d, Tag.ATTN), "v": (d, d, Tag.ATTN),
                      "o": (d, d, Tag.ATTN), "up": (d, hidden, Tag.FF), "down": (hidden, d, Tag.FF)}
            linears = {}
            for name, (n_in, n_out, tag) in shapes.items():
                w, b = init_linear(rng, n_in, n_out)
                sub = "attn" if tag is Tag.ATTN else "ff"
                linears[name] = QuantLinear(w, b, tag, f"blocks.{i}.{sub}.{name}", wspec, aspec)
            blocks.append(Block(linears, d))
        w, b = init_linear(rng, d, dims.d_out)
        head = QuantLinear(w, b, Tag.OTHER, "head", wspec, aspec)
        return cls(blocks, head, dims)

    def linears(self) -> List[QuantLinear]:
        out = [lin for blk in self.blocks for lin in blk.linears()]
        out.append(self.head)
        return out

    def layer_ids(self) -> List[str]:
        return [lin.name for lin in self.linears()]

    def named_linears(self) -> Dict[str, QuantLinear]:
        return {lin.name: lin for lin in self.linears()}

    def parameters(self) -> List[Tensor]:
        return [p for lin in self.linears() for p in lin.parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        for blk in self.blocks:
            x = blk(x)
        return self.head(T.layernorm(x))

    def copy(self) -> "ToyModel":
        clone = copy.deepcopy(self)
        for lin in clone.linears():
            lin.observer = None
            for p in lin.parameters():
                p.grad = None
        return clone

    def quantized_copy(
        self,
        weight_bits: float,
        act_bits: Optional[float] = ACT_BITS,
        form: Form = Form.NARROW,
        rounding: Rounding = Rounding.NEAREST_EVEN,
    ) -> "ToyModel":
        """Byte copy of the weights with fake quantization switched on."""
        clone = self.copy()
        for lin in clone.linears():
            lin.weight_spec = weight_spec(weight_bits, form, rounding)
            lin.act_spec = act_spec(act_bits) if act_bits is not None else None
            lin.act_mode = Mode.DYNAMIC
            lin.set_trainable(False)
        return clone

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for lin in self.linears():
            out[lin.name + ".weight"] = lin.weight.data.copy()
            if lin.bias is not None:
                out[lin.name + ".bias"] = lin.bias.data.copy()
        return out

    def iter_params(self) -> Iterator[tuple]:
        for lin in self.linears():
            yield lin.name + ".weight", lin.weight
            if lin.bias is not None:
                yield lin.name + ".bias", lin.bias


def set_bits(model: ToyModel, bits: float, overrides: Optional[Dict[Tag, float]] = None):
    """Move every layer's weight quantizer to ``bits``; weights are untouched.

    ``overrides`` maps a layer tag to a width that replaces ``bits`` for
    layers carrying that tag.
    """
    bits = check_bits(bits)
    overrides = {Tag(k): check_bits(v) for k, v in (overrides or {}).items()}
    for lin in model.linears():
        b = overrides.get(lin.tag, bits)
        lin.weight_spec = lin.weight_spec.with_bits(b) if lin.weight_spec is not None else weight_spec(b)


@dataclass(frozen=True)
class LayerSelection:
    """Which layer types are trained; everything else is frozen (and still quantized)."""

    mode: Selection = Selection.ALL

    def __post_init__(self):
        object.__setattr__(self, "mode", Selection(self.mode))

    @property
    def tags(self) -> set:
        return set(_SELECTED_TAGS[self.mode])

    def resolve(self, model: ToyModel) -> set:
        return {lin.name for lin in model.linears() if lin.tag in self.tags}


def select_trainable(model: ToyModel, sel: LayerSelection):
    chosen = sel.resolve(model)
    for lin in model.linears():
        lin.set_trainable(lin.name in chosen)


def attach_observers(model: ToyModel):
    for lin in model.linears():
        lin.observer = ActivationObserver()


def detach_observers(model: ToyModel):
    for lin in model.linears():
        lin.observer = None


def observe_activations(model: ToyModel, batch, k_sigma: float = 3.0,
                        bits: float = ACT_BITS) -> Dict[str, CalibrationStats]:
    """Run ``batch`` (an array or a list of arrays) and summarize each layer's inputs.

    Observers already attached keep accumulating, so repeated calls give
    running statistics; otherwise fresh observers are used for this call.
    """
    fresh = any(lin.observer is None for lin in model.linears())
    if fresh:
        attach_observers(model)
    batches = batch if isinstance(batch, (list, tuple)) else [batch]
    try:
        for b in batches:
            model(Tensor(T.as_tensor(b).data))
        return {lin.name: lin.observer.stats(k_sigma, bits) for lin in model.linears()}
    finally:
        if fresh:
            detach_observers(model)


def tag_summary(model: ToyModel, stats: Dict[str, CalibrationStats]) -> Dict[str, dict]:
    """Pool per-layer outlier counts by layer tag."""
    out = {}
    for tag in Tag:
        names = [lin.name for lin in model.linears() if lin.tag is tag]
        if not names:
            continue
        total = sum(stats[n].value_count for n in names)
        outl = sum(stats[n].outlier_count for n in names)
        out[tag.value] = {"layers": len(names), "values": total,
                          "outlier_fraction": outl / total if total else 0.0}
    return out
