"""Self-check suites behind ``cait-lab verify``.

Each suite returns a ``SuiteResult``. ``inject`` names one suite whose code
path is deliberately broken (a mutation hook) so the failure reporting can be
exercised end to end.
"""
from __future__ import annotations

import contextlib
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cait, kernels
from .blocks import LayerScale, Uniform
from .cait import CaitConfig, build_model, fold_layerscale, forward
from .checkpoint import dumps, load_checkpoint
from .gradcheck import op_registry, rel_error, run_registry
from .tensor import Tensor

GRAD_TOL = 1e-6
ROW_TOL = 1e-10
FOLD_TOL = 1e-10


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _small_model(seed: int):
    cfg = CaitConfig(sa_depth=2, ca_depth=2, dim=32, heads=4, patch_count=16, num_classes=3, in_chans=1)
    return build_model(cfg, LayerScale(Uniform(0.1)), seed=seed)


def _inputs(model, n: int, seed: int) -> np.ndarray:
    cfg = model.config
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.patch_count, cfg.patch_dim))


@contextlib.contextmanager
def _patched(obj, name, wrap):
    orig = getattr(obj, name)
    setattr(obj, name, wrap(orig))
    try:
        yield
    finally:
        setattr(obj, name, orig)


def suite_gradients(seed: int, inject: bool) -> SuiteResult:
    ctx = _patched(kernels, "gelu_bwd", lambda f: lambda g, x: f(g, x) * 1.001) if inject \
        else contextlib.nullcontext()
    with ctx:
        rows = run_registry(seed)
    worst = max(rows, key=lambda r: r[2])
    ops = len(op_registry())
    bad = [r for r in rows if not r[2] < GRAD_TOL]
    detail = f"{ops} ops x 3 shapes, worst {worst[0]} {worst[2]:.2e}"
    if bad:
        detail += f"; {len(bad)} above {GRAD_TOL:g}: " + ", ".join(sorted({r[0] for r in bad}))
    return SuiteResult("gradients", not bad, detail)


def suite_attention(seed: int, inject: bool) -> SuiteResult:
    model = _small_model(seed)
    ctx = _patched(kernels, "softmax_fwd", lambda f: lambda x: f(x) * (1 + 1e-6)) if inject \
        else contextlib.nullcontext()
    with ctx:
        _, records = forward(model, Tensor(_inputs(model, 50, seed)))
    dev = max(float(np.max(np.abs(r.row_sums() - 1.0))) for r in records)
    rows = sum(r.row_sums().size for r in records)
    return SuiteResult("attention", dev <= ROW_TOL, f"{rows} rows, max |sum - 1| {dev:.1e}")


def suite_checkpoint(seed: int, inject: bool) -> SuiteResult:
    model = _small_model(seed)
    x = Tensor(_inputs(model, 4, seed))
    raw = dumps(model, {"suite": "verify"})
    if inject:
        raw = raw[:-1] + bytes([raw[-1] ^ 0x01])
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "m.ckpt"
        p.write_bytes(raw)
        loaded, _, _ = load_checkpoint(p)
        same_bytes = dumps(loaded, {"suite": "verify"}) == dumps(model, {"suite": "verify"})
    a, _ = forward(model, x)
    b, _ = forward(loaded, x)
    exact = np.array_equal(a.data, b.data)
    return SuiteResult("checkpoint", exact and same_bytes,
                       f"forward {'bit-identical' if exact else 'differs'}, "
                       f"re-serialization {'identical' if same_bytes else 'differs'}")


def suite_fold(seed: int, inject: bool) -> SuiteResult:
    model = _small_model(seed)
    folded = fold_layerscale(model)
    if inject:
        folded.blocks[0].attn.wo.data[0, 0] += 1e-3
    x = Tensor(_inputs(model, 10, seed))
    a, _ = forward(model, x)
    b, _ = forward(folded, x)
    err = rel_error(a.data, b.data)
    return SuiteResult("fold", err < FOLD_TOL, f"rel. err {err:.1e} on 10 inputs")


def suite_freeze(seed: int, inject: bool) -> SuiteResult:
    model = _small_model(seed)

    def leak(f):
        def wrapped(block, x_class, x_patches, *a, **kw):
            x_patches.data = x_patches.data + 1e-12
            return f(block, x_class, x_patches, *a, **kw)
        return wrapped

    ctx = _patched(cait, "ca_block_forward", leak) if inject else contextlib.nullcontext()
    trace = {}
    with ctx:
        forward(model, Tensor(_inputs(model, 8, seed)), trace=trace)
    same = np.array_equal(trace["sa_out"], trace["ca_patches"])
    return SuiteResult("freeze", same, "patch embeddings " + ("bit-identical" if same else "modified") + " through CA")


SUITES = {
    "gradients": suite_gradients,
    "attention": suite_attention,
    "checkpoint": suite_checkpoint,
    "fold": suite_fold,
    "freeze": suite_freeze,
}


def run_suites(names=None, seed: int = 0, inject=None) -> list[SuiteResult]:
    out = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        try:
            res = SUITES[name](seed, inject == name)
        except Exception as exc:  # a crashing suite is a failing suite
            res = SuiteResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
