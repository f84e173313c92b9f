"""Row kernels for LayerNorm, softmax and GELU.

Two interchangeable backends exist: numba-compiled loops (default when numba
imports) and vectorized numpy. Set ``CAIT_LAB_NUMBA=0`` before import to force
the numpy path. ``use_backend`` switches at runtime, mainly for tests and the
benchmark.
"""
import os

from . import _numpy

try:
    from . import _numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    NUMBA_AVAILABLE = False

_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "gelu_fwd",
    "gelu_bwd",
)

BACKEND = "numpy"


def use_backend(name):
    """Select ``"numba"`` or ``"numpy"`` for every kernel in this module."""
    global BACKEND
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError("numba backend requested but numba is not importable")
        src = _numba
    elif name == "numpy":
        src = _numpy
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(src, fn)
    BACKEND = name


def _env_default():
    flag = os.environ.get("CAIT_LAB_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not NUMBA_AVAILABLE:
        return "numpy"
    return "numba"


use_backend(_env_default())

__all__ = ["BACKEND", "NUMBA_AVAILABLE", "use_backend", *_NAMES]
