"""A small define-by-run reverse-mode autodiff engine on numpy arrays.

Only the operations needed for dense feed-forward and single-head attention
blocks are provided. All arithmetic is float64. Every forward op checks its
output for NaN/Inf and raises :class:`FloatingPointError` instead of letting
non-finite values propagate.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    """An n-d array that can record how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    # Only trailing-dimension broadcasting (bias-style) is supported.
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    tail = long_[len(long_) - len(short):]
    if any(s != t and s != 1 for s, t in zip(short, tail)):
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; a 2-d ``b`` is shared across a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch shape mismatch {a.shape} x {b.shape}")

    if b.ndim == 2:
        # shared weight: fold batch axes into rows so each product is one GEMM
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make((a2 @ b.data).reshape(a.shape[:-1] + (n,)), (a, b), bw, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(a.data, -1, -2), (a,), bw, "transpose")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x * x * x))

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(0.5 * x * (1.0 + t), (a,), bw, "gelu")


def layernorm(a, eps: float = 1e-8) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ValueError("layernorm over a zero-length axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), bw, "layernorm")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming inside this namespace
    a = as_tensor(a)

    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum()), (a,), bw, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def bw(g):
        return (np.full(a.shape, float(g) / n),)

    return _make(np.asarray(a.data.mean()), (a,), bw, "mean")


def mse_loss(pred, target) -> Tensor:
    """Mean squared error reduced by the mean over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gd = (2.0 * float(g) / n) * diff
        return gd, -gd

    return _make(np.asarray((diff * diff).mean()), (pred, target), bw, "mse_loss")


def stop_grad(t) -> Tensor:
    """Same values, no history: nothing flows back through the result."""
    t = as_tensor(t)
    return Tensor(t.data)


def custom(a: Tensor, data: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray], op: str) -> Tensor:
    """Unary op with caller-supplied forward value and backward rule."""

    def bw(g):
        return (grad_fn(g),)

    return _make(np.asarray(data, dtype=DTYPE), (a,), bw, op)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``.grad`` on every leaf that requires it, then free the graph.

    Leaf gradients accumulate across calls, as in most frameworks; clear them
    with ``zero_grad``. Calling this twice on the same loss raises.
    """
    if loss._consumed:
        raise RuntimeError("backward() already called on this graph; run the forward pass again")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
    loss._consumed = True


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference estimate of ``d f / d x`` for scalar-valued ``f``."""
    if not h > 0:
        raise ValueError("h must be positive")
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    grad = np.zeros_like(base)

    def evaluate(arr):
        out = f(Tensor(arr))
        val = out.item() if isinstance(out, Tensor) else float(out)
        if not math.isfinite(val):
            raise FloatingPointError("finite_diff_grad: f returned a non-finite value")
        return val

    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
