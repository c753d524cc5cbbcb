"""Dense tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape (or inside
:func:`no_grad`) every operation is a plain numpy computation, which is how
teacher inference and evaluation run.

Example::

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape():
        loss = (x * x).sum() * 0.5
    loss.backward()
    assert np.allclose(x.grad, x.data)
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, LabelError

DEFAULT_DTYPE = np.float32
PROB_CLAMP = 1e-7

_TAPE_STACK: list = []


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A float array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        if self._tape is None:
            if not self.requires_grad:
                raise ContractError("backward() on a tensor that does not require grad")
            raise ContractError("backward() on a tensor that was not produced on a tape")
        self._tape.backward(self)

    # -- operators --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def clamp_min(self, low):
        return clamp_min(self, low)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede the
    node that consumes them; :meth:`backward` walks them once in reverse.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        output.requires_grad = True
        output._tape = self
        self.nodes.append(Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    # leaf
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=inp.dtype, copy=True)
                    else:
                        inp.grad += ig
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig


def current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _const(x, like: np.ndarray) -> np.ndarray:
    """Python/numpy scalars adopt the tensor's dtype instead of upcasting it."""
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if arr.ndim == 0 or arr.dtype.kind != "f":
        return arr.astype(like.dtype)
    return arr


def _maybe_record(inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = current_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(inputs, out, backward)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def _binary(a, b, fn, grad_fn):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = (ta if ta is not None else tb).data
    ad = _const(a, ref)
    bd = _const(b, ref)
    out = fn(ad, bd)

    def backward(g):
        ga, gb = grad_fn(g, ad, bd, out)
        return (
            unbroadcast(ga, ad.shape) if ta is not None and ta.requires_grad else None,
            unbroadcast(gb, bd.shape) if tb is not None and tb.requires_grad else None,
        )

    return _maybe_record((a, b), out, backward)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y, o: (g, g))


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y, o: (g, -g))


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y, o: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide, lambda g, x, y, o: (g / y, -g * o / y))


def _unary(x: Tensor, fn, grad_fn) -> Tensor:
    out = fn(x.data)

    def backward(g):
        return (grad_fn(g, x.data, out),)

    return _maybe_record((x,), out, backward)


def relu(x: Tensor) -> Tensor:
    return _unary(x, lambda d: np.maximum(d, 0), lambda g, d, o: g * (d > 0))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)


def sigmoid(x: Tensor) -> Tensor:
    return _unary(x, _sigmoid, lambda g, d, o: g * o * (1 - o))


def exp(x: Tensor) -> Tensor:
    return _unary(x, np.exp, lambda g, d, o: g * o)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log, lambda g, d, o: g / d)


def clamp_min(x: Tensor, low: float) -> Tensor:
    return _unary(x, lambda d: np.maximum(d, d.dtype.type(low)), lambda g, d, o: g * (d >= low))


# -- reductions and shape ---------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _maybe_record((x,), out, backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / max(count, 1))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _maybe_record((x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _maybe_record((x,), out, lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _maybe_record((x,), out, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _maybe_record(tuple(tensors), out, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-broadcast semantics (both operands ≥ 2-D)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _maybe_record((a, b), out, backward)


def _im2col(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (C*9, B*H*W), zero padding 1
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(C * 9, B * H * W)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is ``C_in x H x W`` or a batch ``B x C_in x H x W``.
    """
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d needs C_out x C_in x 3 x 3 kernels, got {kernels.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    B, C, H, W = xd.shape
    C_out = kernels.shape[0]
    if kernels.shape[1] != C:
        raise DimensionError(f"conv2d channel mismatch: input has {C}, kernels expect {kernels.shape[1]}")
    if bias.shape != (C_out,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({C_out},)")
    col = _im2col(xd)
    wmat = kernels.data.reshape(C_out, C * 9)
    out = (wmat @ col).reshape(C_out, B, H, W).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(C_out, B * H * W)
        gx = gk = gb = None
        if kernels.requires_grad:
            gk = (gmat @ col.T).reshape(kernels.shape)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcol = (wmat.T @ gmat).reshape(C, 3, 3, B, H, W)
            gpad = np.zeros((C, B, H + 2, W + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    gpad[:, :, i:i + H, j:j + W] += gcol[:, i, j]
            gx = gpad[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
            if single:
                gx = gx[0]
        return gx, gk, gb

    return _maybe_record((x, kernels, bias), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _maybe_record((x,), out, backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an ``m x n`` tensor."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    return softmax(x, axis=-1)


# -- losses -----------------------------------------------------------------

def cross_entropy(probs: Tensor, targets, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row probabilities."""
    targets = np.asarray(targets, dtype=np.int64)
    n_rows, n_classes = probs.shape
    if targets.shape != (n_rows,):
        raise DimensionError(f"cross_entropy targets shape {targets.shape} != ({n_rows},)")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        bad = targets[(targets < 0) | (targets >= n_classes)][0]
        raise LabelError(f"class id {int(bad)} outside [0, {n_classes})")
    picked = getitem(probs, (np.arange(n_rows), targets))
    return -mean(log(clamp_min(picked, clamp)))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean pixelwise binary cross-entropy, computed stably from logits."""
    y = np.asarray(targets).astype(logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"bce_with_logits shape mismatch: {logits.shape} vs {y.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean(), dtype=x.dtype)
    scale = x.dtype.type(1.0 / max(x.size, 1))

    def backward(g):
        return ((_sigmoid(x) - y) * (g * scale),)

    return _maybe_record((logits,), out, backward)


def dice_loss(logits: Tensor, targets, smooth: float = 1.0) -> Tensor:
    """Mean over rows of ``1 - (2|p*y| + s) / (|p| + |y| + s)`` with ``p = sigmoid(logits)``.

    ``logits`` and ``targets`` are ``k x P`` (one flattened mask per row).
    """
    y = np.asarray(targets).astype(logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"dice_loss shape mismatch: {logits.shape} vs {y.shape}")
    p = sigmoid(logits)
    inter = (p * y).sum(axis=-1)
    denom = p.sum(axis=-1) + (y.sum(axis=-1) + smooth)
    return mean(1.0 - (inter * 2.0 + smooth) / denom)
