"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` (entered with ``with``)
whenever at least one input requires a gradient. Outside a tape nothing is
recorded, which is how inference runs.

Broadcasting is deliberately narrow: ``add`` accepts a right operand whose
shape matches the trailing axes of the left one (biases), ``scale_rows``
multiplies the last axis by a vector, and ``matmul`` shares a 2-D right
operand across any leading batch axes. Everything else requires equal shapes.
"""
from __future__ import annotations

import contextvars
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

LN_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward or backward value."""


_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "cait_lab_tape", default=None
)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_const(self, other)

    __rmul__ = __mul__


class Tape:
    """Ordered record of differentiable operations.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = w * 3.0
    ...     tape.backward(y)
    >>> float(w.grad[0])
    3.0
    """

    def __init__(self):
        self._nodes: list = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self._nodes.append((out, tuple(parents), backward))

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward() on non-scalar of shape {loss.shape} needs a seed grad")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for out, parents, fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for p, gp in zip(parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                if not np.isfinite(gp).all():
                    raise NonFiniteError(f"non-finite gradient flowing into {p!r}")
                p.grad = gp if p.grad is None else p.grad + gp

    def clear(self) -> None:
        self._nodes = []


def _result(arr: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    needs = any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.record(out, parents, backward)
    return out


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    A 2-D ``b`` is shared across all leading axes of ``a`` (the weight case);
    otherwise both operands must carry identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ _swap_last(B) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = _rows(A).T @ _rows(g)
            else:
                gb = _swap_last(A) @ g
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 axes, got {x.shape}")
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _result(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from exc
    src = x.shape
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat shape mismatch along axis {axis}: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    return _result(out, tensors, backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""
    ax = axis % x.ndim
    if start < 0 or length <= 0 or start + length > x.shape[ax]:
        raise ShapeError(f"narrow [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])
    src = x.shape

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _result(out, (x,), backward, "narrow")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum of equal shapes, or ``b`` broadcast over the leading axes of ``a``."""
    if a.shape != b.shape and (b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape):
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data
    lead = a.ndim - b.ndim

    def backward(g):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return g, gb

    return _result(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a non-differentiable constant (scalar or broadcastable mask)."""
    c = np.asarray(c, dtype=np.float64)
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeError(f"constant of shape {c.shape} would change shape {x.shape}")
    return _result(out, (x,), lambda g: (g * c,), "mul_const")


def scale_rows(x: Tensor, diag: Tensor) -> Tensor:
    """Multiply channel ``i`` of the last axis by ``diag[i]`` (``x @ diag(diag)``)."""
    if diag.ndim != 1 or diag.shape[0] != x.shape[-1]:
        raise ShapeError(f"scale_rows expects diag of shape ({x.shape[-1]},), got {diag.shape}")
    X, D = x.data, diag.data

    def backward(g):
        gd = _rows(g * X).sum(axis=0) if diag.requires_grad else None
        return g * D, gd

    return _result(X * D, (x, diag), backward, "scale_rows")


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply by a learnable scalar held in a 1-element tensor."""
    if alpha.size != 1:
        raise ShapeError(f"scale expects a single-element alpha, got {alpha.shape}")
    X = x.data
    a = alpha.data.reshape(-1)[0]

    def backward(g):
        ga = np.array([np.sum(g * X)]).reshape(alpha.shape) if alpha.requires_grad else None
        return g * a, ga

    return _result(X * a, (x, alpha), backward, "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    X = x.data
    out = kernels.gelu_fwd(_rows(X)).reshape(X.shape)
    return _result(out, (x,), lambda g: (kernels.gelu_bwd(_rows(g), _rows(X)).reshape(X.shape),), "gelu")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims), dtype=np.float64)
    scalar_out = out.ndim == 0
    if scalar_out:
        out = out.reshape(1)
    src = x.shape

    def backward(g):
        if scalar_out:
            return (np.broadcast_to(g.reshape(-1)[0], src).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, src).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul_const(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- normalization


def softmax(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    y = kernels.softmax_fwd(_rows(x.data)).reshape(x.shape)
    return _result(
        y, (x,), lambda g: (kernels.softmax_bwd(_rows(g), _rows(y)).reshape(y.shape),), "softmax"
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    y, xhat, rstd = kernels.layer_norm_fwd(_rows(x.data), gamma.data, beta.data, eps)
    src = x.shape

    def backward(g):
        dx, dgamma, dbeta = kernels.layer_norm_bwd(_rows(g), xhat, rstd, gamma.data)
        return dx.reshape(src), dgamma, dbeta

    return _result(y.reshape(src), (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- regularization


def dropout_mask(shape, p: float, rng: np.random.Generator, training: bool) -> np.ndarray:
    """Inverse-scaled keep mask; all ones outside training or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    return mul_const(x, dropout_mask(x.shape, p, rng, training))


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of ``[B, C]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects [B, C] logits and B labels, got {logits.shape}, {labels.shape}")
    B, C = logits.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    Z = logits.data
    z = Z - Z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.full((B, C), smoothing / C)
    target[np.arange(B), labels] += 1.0 - smoothing
    loss = np.array([-(target * logp).sum() / B])

    def backward(g):
        return ((np.exp(logp) - target) * (g[0] / B),)

    return _result(loss, (logits,), backward, "cross_entropy")
