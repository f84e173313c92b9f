import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cait_lab import kernels
from cait_lab.kernels import _numba, _numpy

rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
                  elements=st.floats(-30, 30))


@settings(max_examples=50, deadline=None)
@given(rows)
def test_backends_agree(x):
    d = x.shape[1]
    rng = np.random.default_rng(0)
    g = rng.standard_normal(x.shape)
    gamma, beta = rng.standard_normal(d), rng.standard_normal(d)
    _, xhat, rstd = _numpy.layer_norm_fwd(x, gamma, beta, 1e-6)
    # summation order differs; near-constant rows amplify rounding by 1/std
    cond = 1.0 + np.abs(x).max() * rstd.max()
    for a, b in zip(_numpy.layer_norm_fwd(x, gamma, beta, 1e-6), _numba.layer_norm_fwd(x, gamma, beta, 1e-6)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13 * cond)
    for a, b in zip(_numpy.layer_norm_bwd(g, xhat, rstd, gamma), _numba.layer_norm_bwd(g, xhat, rstd, gamma)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13 * cond * (1 + rstd.max()))
    y = _numpy.softmax_fwd(x)
    np.testing.assert_allclose(y, _numba.softmax_fwd(x), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(_numpy.softmax_bwd(g, y), _numba.softmax_bwd(g, y), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(_numpy.gelu_fwd(x), _numba.gelu_fwd(x), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(_numpy.gelu_bwd(g, x), _numba.gelu_bwd(g, x), rtol=1e-12, atol=1e-14)


def test_use_backend_switches_and_restores():
    start = kernels.BACKEND
    try:
        kernels.use_backend("numpy")
        assert kernels.BACKEND == "numpy" and kernels.gelu_fwd is _numpy.gelu_fwd
        kernels.use_backend("numba")
        assert kernels.gelu_fwd is _numba.gelu_fwd
    finally:
        kernels.use_backend(start)
    with pytest.raises(ValueError):
        kernels.use_backend("cuda")


def test_gradients_hold_on_numpy_backend():
    from cait_lab.gradcheck import run_registry

    start = kernels.BACKEND
    kernels.use_backend("numpy")
    try:
        assert max(err for _, _, err in run_registry(seed=2)) < 1e-6
    finally:
        kernels.use_backend(start)


def test_env_flag_selects_numpy():
    env = dict(os.environ, CAIT_LAB_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from cait_lab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
