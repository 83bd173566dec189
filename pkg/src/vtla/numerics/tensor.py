"""Minimal deterministic tensor library with reverse-mode autodiff.

Tensors wrap numpy arrays (float32 by default, float64 for gradient checks).
Operations executed inside a `with Tape():` block are recorded; `backward`
replays the tape in reverse and accumulates gradients on requires_grad leaves.
A tape is single-use and confined to one thread.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


_checked = True


def set_checked(flag: bool) -> bool:
    """Toggle NaN/Inf checking on op outputs; returns the previous setting."""
    global _checked
    prev = _checked
    _checked = bool(flag)
    return prev


class Tensor:
    """N-d array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped without gradient tracking
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


class TapeEntry:
    __slots__ = ("op", "input_ids", "output_id", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.input_ids = tuple(id(t) for t in inputs)
        # keep the output alive so ids stay unique for the tape's lifetime
        self.output = output
        self.output_id = id(output)
        self.backward = backward


class Tape:
    """Recorded computation graph, in execution (topological) order."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False
        self._owner = threading.get_ident()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def _record(self, entry: TapeEntry) -> None:
        if threading.get_ident() != self._owner:
            raise NumericError("tape is confined to the thread that created it")
        self.entries.append(entry)


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if _checked and not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op}: non-finite value in output")
    tape = _active_tape()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = requires
    out.grad = None
    if requires:
        tape._record(TapeEntry(op, inputs, out, backward))
    return out


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate gradients of a scalar root into all requires_grad leaves.

    A tape can be walked once; a second call raises. Gradients land on the
    `.grad` of leaf tensors (tensors that are never an op output).
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {tuple(root.shape)}")
    if tape.consumed:
        raise NumericError("tape already consumed; build a new graph to backprop again")
    tape.consumed = True
    produced = {e.output_id for e in tape.entries}
    if id(root) not in produced:
        raise NumericError("root is not a node recorded on this tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for entry in reversed(tape.entries):
        g_out = grads.pop(entry.output_id, None)
        if g_out is None:
            continue
        in_grads = entry.backward(g_out)
        for t, g in zip(entry.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in grads:
                grads[tid] = grads[tid] + g
            elif id(t) not in produced:
                # leaf: write through to .grad
                if t.grad is None:
                    t.grad = g.astype(t.dtype, copy=True)
                else:
                    t.grad = t.grad + g.astype(t.dtype)
            else:
                grads[tid] = g


def _reduce_to_shape(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(g, b.shape)

    return _apply("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _reduce_to_shape(g, a.shape), _reduce_to_shape(-g, b.shape)

    return _apply("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    out = a.data * b.data

    def bwd(g):
        return (_reduce_to_shape(g * b.data, a.shape),
                _reduce_to_shape(g * a.data, b.shape))

    return _apply("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to_shape(ga, a.shape), _reduce_to_shape(gb, b.shape)

    return _apply("div", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _apply("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _apply("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _apply("sqrt", (a,), out, lambda g: (g * (0.5 / out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _apply("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _apply("relu", (a,), out, lambda g: (g * (a.data > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * dx,)

    return _apply("gelu", (a,), out, bwd)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient passes through the interior only."""
    out = np.clip(a.data, low, high)
    mask = (a.data >= low) & (a.data <= high)
    return _apply("clip", (a,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("sum", (a,), np.asarray(out), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def bwd(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("mean", (a,), np.asarray(out), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _apply("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _apply("transpose", (a,), out, lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", tuple(tensors), out, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _apply("narrow", (a,), out, bwd)


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup a[indices] with scatter-add backward (embedding tables)."""
    indices = np.asarray(indices)
    out = a.data[indices]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, indices, g)
        return (full,)

    return _apply("gather_rows", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-d x 2-d, batched with equal batch dims,
    and n-d x 2-d (the 2-d operand broadcasts over batch dims)."""
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-d, got {tuple(a.shape)} x {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {tuple(a.shape)} x {tuple(b.shape)}")
    if a.ndim != b.ndim and b.ndim != 2 and a.ndim != 2:
        raise ShapeError(f"matmul: unsupported broadcast {tuple(a.shape)} x {tuple(b.shape)}")
    if a.ndim == b.ndim and a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {tuple(a.shape)} x {tuple(b.shape)}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if ga.shape != a.shape:
            ga = ga.reshape((-1,) + a.shape[-2:]).sum(axis=0) if a.ndim == 2 else ga
        if gb.shape != b.shape:
            gb = gb.reshape((-1,) + b.shape[-2:]).sum(axis=0)
        return ga, gb

    return _apply("matmul", (a, b), out, bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b over the last axis; x may carry leading batch dims."""
    _check_same_dtype("linear", x, w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bwd(g):
        gx = g @ w.data.T
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _apply("linear", inputs, out, bwd)


# ---------------------------------------------------------------------------
# fused nonlinearities and losses
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply("softmax", (a,), out, bwd)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {tuple(logits.shape)}")
    targets = np.asarray(targets)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: targets shape {targets.shape} != ({n},)")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise IndexError(f"softmax_cross_entropy: target out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = (logsumexp - shifted[np.arange(n), targets]).mean()

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        return (g * p / n,)

    return _apply("softmax_cross_entropy", (logits,),
                  np.asarray(loss, dtype=logits.dtype), bwd)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from raw logits, numerically stabilized."""
    labels = np.asarray(labels, dtype=logits.dtype)
    if logits.shape != labels.shape:
        raise ShapeError(f"bce_with_logits: logits {tuple(logits.shape)} != labels {labels.shape}")
    if logits.size == 0:
        raise ShapeError("bce_with_logits: empty pair set")
    x = logits.data
    # softplus(x) - x*y, with softplus(x) = max(x, 0) + log1p(exp(-|x|))
    loss = (np.maximum(x, 0) - x * labels + np.log1p(np.exp(-np.abs(x)))).mean()

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return (g * (sig - labels) / x.size,)

    return _apply("bce_with_logits", (logits,), np.asarray(loss, dtype=logits.dtype), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {tuple(gain.shape)} / {tuple(bias.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def bwd(g):
        gy = g * gain.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        flat_y = y.reshape(-1, d)
        ggain = (flat_g * flat_y).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        return gx, ggain, gbias

    return _apply("layer_norm", (x, gain, bias), out, bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit L2 norm (composed from primitives)."""
    sq = tsum(mul(x, x), axis=axis, keepdims=True)
    norm = sqrt(add(sq, Tensor(np.asarray(eps, dtype=x.dtype))))
    return div(x, norm)
