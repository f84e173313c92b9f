"""Compare the numba and numpy row kernels, and time SA vs CA layers over p.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from cait_lab import kernels
from cait_lab.blocks import ca_forward, init_block, PreNormBaseline, sa_forward
from cait_lab.tensor import Tensor


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rows, d):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, d))
    g = rng.standard_normal((rows, d))
    gamma, beta = np.ones(d), np.zeros(d)
    _, xhat, rstd = kernels._numpy.layer_norm_fwd(x, gamma, beta, 1e-6)
    y = kernels._numpy.softmax_fwd(x)
    return {
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(x, gamma, beta, 1e-6),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(g, xhat, rstd, gamma),
        "softmax_fwd": lambda: kernels.softmax_fwd(x),
        "softmax_bwd": lambda: kernels.softmax_bwd(g, y),
        "gelu_fwd": lambda: kernels.gelu_fwd(x),
        "gelu_bwd": lambda: kernels.gelu_bwd(g, x),
    }


def bench_kernels(repeat):
    print(f"{'kernel':16s} {'shape':>12s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for rows, d in ((64, 64), (1024, 64), (4096, 256)):
        timings = {}
        for backend in ("numpy", "numba"):
            kernels.use_backend(backend)
            for name, fn in kernel_cases(rows, d).items():
                fn()  # compile / warm caches
                timings[(backend, name)] = best_of(fn, repeat)
        for name in kernel_cases(1, 1):
            a, b = timings[("numpy", name)], timings[("numba", name)]
            print(f"{name:16s} {f'{rows}x{d}':>12s} {a * 1e6:10.1f} {b * 1e6:10.1f} {a / b:8.2f}")
    kernels.use_backend("numba")


def bench_layers(repeat):
    rng = np.random.default_rng(0)
    d, h = 64, 4
    sa = init_block(rng, "SA", d, h, PreNormBaseline(), 4, True, 4).attn
    ca = init_block(rng, "CA", d, h, PreNormBaseline(), 4, False, 4).attn
    print(f"\n{'p':>5s} {'SA attn ms':>11s} {'CA attn ms':>11s}")
    for p in (16, 64, 256):
        x = Tensor(rng.standard_normal((1, p, d)))
        cls = Tensor(rng.standard_normal((1, 1, d)))
        t_sa = best_of(lambda: sa_forward(sa, x), repeat)
        t_ca = best_of(lambda: ca_forward(ca, cls, x), repeat)
        print(f"{p:5d} {t_sa * 1e3:11.3f} {t_ca * 1e3:11.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_layers(args.repeat)
