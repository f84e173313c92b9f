"""Central finite-difference checks for tensor operations.

The numerical side only ever evaluates forward passes on perturbed copies of
the input buffers, so it stays independent of every backward rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

FD_STEP = 1e-5


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, safe when both sides vanish."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0.0:
        return 0.0
    return float(num / den)


def numerical_grad(f: Callable[[], float], x: Tensor, step: float = FD_STEP) -> np.ndarray:
    """d f / d x by central differences; ``f`` re-reads ``x.data`` on each call."""
    flat = x.data.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0,
                    step: float = FD_STEP, projection: np.ndarray | None = None) -> dict:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` with finite differences.

    ``R`` is a fixed random projection unless given; a plain ``sum`` would make
    shift-invariant ops such as softmax look trivially correct. Returns the
    relative error per differentiable input index.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        if projection is None:
            projection = np.random.default_rng(seed).standard_normal(out.shape)
        tape.backward(out, grad=projection.copy())

    def scalar():
        return float(np.sum(fn(*inputs).data * projection))

    errors = {}
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        errors[i] = rel_error(analytic, numerical_grad(scalar, t, step))
    return errors


@dataclass
class GradCase:
    """One differentiable op exercised at several input shapes."""

    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator, tuple], list]
    shapes: list = field(default_factory=list)


def _param(rng, shape, lo=None):
    arr = rng.standard_normal(shape)
    if lo is not None:
        arr = np.abs(arr) + lo
    return Tensor(arr, requires_grad=True)


def _labels_for(rng, shape):
    return rng.integers(0, shape[1], size=shape[0])


def op_registry() -> list[GradCase]:
    """Every differentiable primitive with three or more test shapes."""
    cases = [
        GradCase("matmul", T.matmul,
                 lambda r, s: [_param(r, s[0]), _param(r, s[1])],
                 [((5, 7), (7, 3)), ((2, 4, 3), (3, 5)), ((2, 3, 4, 2), (2, 3, 2, 5))]),
        GradCase("add", T.add,
                 lambda r, s: [_param(r, s[0]), _param(r, s[1])],
                 [((3, 4), (3, 4)), ((2, 3, 5), (5,)), ((2, 3, 4), (3, 4))]),
        GradCase("mul", T.mul,
                 lambda r, s: [_param(r, s), _param(r, s)],
                 [(4,), (3, 5), (2, 3, 4)]),
        GradCase("mul_const", lambda x: T.mul_const(x, 0.37),
                 lambda r, s: [_param(r, s)],
                 [(4,), (3, 5), (2, 3, 4)]),
        GradCase("scale_rows", T.scale_rows,
                 lambda r, s: [_param(r, s), _param(r, (s[-1],))],
                 [(3, 4), (2, 5, 6), (1, 8)]),
        GradCase("scale", T.scale,
                 lambda r, s: [_param(r, s), _param(r, (1,))],
                 [(3, 4), (2, 5, 6), (7,)]),
        GradCase("gelu", T.gelu,
                 lambda r, s: [_param(r, s)],
                 [(5,), (3, 4), (2, 3, 6)]),
        GradCase("softmax", T.softmax,
                 lambda r, s: [_param(r, s)],
                 [(5,), (3, 4), (2, 3, 6)]),
        GradCase("layer_norm", T.layer_norm,
                 lambda r, s: [_param(r, s), _param(r, (s[-1],)), _param(r, (s[-1],))],
                 [(3, 8), (2, 4, 5), (1, 3)]),
        GradCase("transpose", T.transpose,
                 lambda r, s: [_param(r, s)],
                 [(3, 4), (2, 3, 5), (2, 3, 4, 2)]),
        GradCase("transpose_perm", lambda x: T.transpose(x, (0, 2, 1, 3)),
                 lambda r, s: [_param(r, s)],
                 [(2, 3, 4, 2), (1, 2, 3, 4), (3, 1, 2, 2)]),
        GradCase("reshape", lambda x: T.reshape(x, (-1,)),
                 lambda r, s: [_param(r, s)],
                 [(3, 4), (2, 3, 5), (6,)]),
        GradCase("sum", lambda x: T.sum(x, axis=-1),
                 lambda r, s: [_param(r, s)],
                 [(3, 4), (2, 3, 5), (6,)]),
        GradCase("mean", lambda x: T.mean(x, axis=0),
                 lambda r, s: [_param(r, s)],
                 [(3, 4), (2, 3, 5), (6,)]),
        GradCase("concat", lambda a, b: T.concat([a, b], axis=-2),
                 lambda r, s: [_param(r, s[0]), _param(r, s[1])],
                 [((1, 4), (3, 4)), ((2, 1, 3), (2, 5, 3)), ((2, 2, 2), (2, 3, 2))]),
        GradCase("narrow", lambda x: T.narrow(x, -2, 1, 2),
                 lambda r, s: [_param(r, s)],
                 [(3, 4), (2, 4, 3), (2, 3, 3, 2)]),
        GradCase("dropout", lambda x: T.dropout(x, 0.3, np.random.default_rng(5), True),
                 lambda r, s: [_param(r, s)],
                 [(4,), (3, 5), (2, 3, 4)]),
        GradCase("cross_entropy", None,
                 lambda r, s: [_param(r, s)],
                 [(4, 3), (2, 5), (6, 2)]),
    ]
    return cases


def run_registry(seed: int = 0, cases: list[GradCase] | None = None) -> list[tuple[str, tuple, float]]:
    """Evaluate every case; returns ``(name, shape, worst rel. error)`` rows."""
    rows = []
    for case in cases if cases is not None else op_registry():
        for k, shape in enumerate(case.shapes):
            rng = np.random.default_rng([seed, k, len(case.name)])
            inputs = case.make_inputs(rng, shape)
            fn = case.fn
            if case.name == "cross_entropy":
                labels = _labels_for(rng, shape)
                fn = lambda x, labels=labels: T.cross_entropy(x, labels, smoothing=0.1)  # noqa: E731
            errs = check_gradients(fn, inputs, seed=seed + k)
            rows.append((case.name, shape, max(errs.values()) if errs else 0.0))
    return rows
