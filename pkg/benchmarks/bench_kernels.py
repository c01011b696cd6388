"""Benchmark the numba kernels against the pure-numpy fallback.

Runs the unfold/fold and pooling kernels, and a full conv2d
forward+backward, under both backends on identical inputs. The two
backends are bit-identical by construction; this script shows what the
jit actually buys (and verifies the equality while at it).

Usage: python benchmarks/bench_kernels.py [--size 128] [--batch 16] [--repeats 5]
"""

import argparse
import time

import numpy as np

from cellwatch import kernels
from cellwatch import tensor as T


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(size, batch, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 6, size, size)).astype(np.float32)
    w = rng.standard_normal((16, 6, 3, 3)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols_shape = kernels.im2col(xp, 3, 3, 1).shape
    dcols = rng.standard_normal(cols_shape).astype(np.float32)

    _, absidx = kernels.maxpool_forward(x, (2, 2), 2)
    gy = rng.standard_normal(absidx.shape).astype(np.float32)

    cases = {
        "im2col": lambda: kernels.im2col(xp, 3, 3, 1),
        "col2im": lambda: kernels.col2im(dcols, batch, 6, size + 2, size + 2, 3, 3, 1),
        "maxpool fwd": lambda: kernels.maxpool_forward(x, (2, 2), 2),
        "maxpool bwd": lambda: kernels.maxpool_backward(gy, absidx, size, size),
    }

    def conv_step():
        xt = T.Tensor(x, requires_grad=True)
        wt = T.Tensor(w, requires_grad=True)
        bt = T.Tensor(b, requires_grad=True)
        y = T.max_pool2d(T.relu(T.conv2d(xt, wt, bt, stride=1, padding=1)), 2)
        (y * y).sum().backward()
        return xt.grad

    cases["conv2d fwd+bwd"] = conv_step

    results = {}
    checks = {}
    for backend in kernels.available_backends():
        kernels.use_backend(backend)
        for name, fn in cases.items():
            fn()  # warm-up (jit compile on first numba call)
            results[(name, backend)] = best_of(fn, repeats)
            checks.setdefault(name, []).append(
                fn() if name != "maxpool fwd" else fn()[0]
            )

    for name, outs in checks.items():
        ref = outs[0]
        for other in outs[1:]:
            if not np.array_equal(np.asarray(ref), np.asarray(other)):
                raise AssertionError(f"{name}: backends disagree")

    backends = kernels.available_backends()
    print(f"input: batch={batch} channels=6 size={size}x{size}, best of {repeats}")
    header = f"{'kernel':>16}" + "".join(f"{be:>12}" for be in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name in cases:
        line = f"{name:>16}"
        for be in backends:
            line += f"{results[(name, be)] * 1000:>10.2f}ms"
        if len(backends) == 2:
            line += f"{results[(name, 'numpy')] / results[(name, 'numba')]:>9.2f}x"
        print(line)
    print("outputs bit-identical across backends: yes")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=5)
    a = ap.parse_args()
    run(a.size, a.batch, a.repeats)
