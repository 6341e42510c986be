"""Compare the numba and numpy convolution kernels on training-shaped work.

Usage::

    python3 benchmarks/bench_backends.py [--repeats 5]

Times the three convolution primitives on layer shapes taken from the
toy segmentation network, plus one full forward/backward pass through
that network, under each backend.  On machines with many cores the
compiled loops parallelize across the batch; on one or two cores the
BLAS-backed im2col path usually wins.
"""

import argparse
import time

import numpy as np

from lrhyper import backend
from lrhyper.backend import (
    conv2d_forward,
    conv2d_input_grad,
    conv2d_weight_grad,
)
from lrhyper import autodiff as ad
from lrhyper.networks import NetworkSpec, build_network
from lrhyper.rng import make_rng
from lrhyper.training import total_loss

# (label, batch, ci, co, spatial, kernel, stride, pad)
SHAPES = [
    ("enc 8->16 32px", 8, 8, 16, 32, 3, 1, 1),
    ("down 16 s2", 8, 16, 16, 32, 2, 2, 0),
    ("bridge 32 16px", 8, 32, 32, 16, 3, 1, 1),
]


def time_call(fn, repeats):
    fn()  # warm up (and trigger any compilation)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_primitives(repeats):
    rows = []
    for label, b, ci, co, hw, k, stride, pad in SHAPES:
        rng = make_rng(0)
        x = rng.normal(size=(b, ci, hw, hw))
        w = rng.normal(size=(co, ci, k, k))
        y = conv2d_forward(x, w, stride, pad)
        g = rng.normal(size=y.shape)
        calls = {
            "forward": lambda: conv2d_forward(x, w, stride, pad),
            "dx": lambda: conv2d_input_grad(g, w, stride, pad, (hw, hw)),
            "dw": lambda: conv2d_weight_grad(x, g, stride, pad, (k, k)),
        }
        for name, fn in calls.items():
            rows.append((f"{label} {name}", time_call(fn, repeats)))
    return rows


def bench_train_step(repeats):
    spec = NetworkSpec(task="segmentation", n_modalities=2, n_classes=3,
                       channels=[8, 16, 32], spatial_rank=2)
    net = build_network(spec, 0)
    rng = make_rng(1)
    x = {n: rng.normal(size=(4, 1, 32, 32)) for n in range(2)}
    t = rng.integers(0, 3, size=(4, 32, 32))

    def step():
        ad.zero_grad(net.params().values())
        loss = total_loss(net, x, t, 3, "dice+ce")
        ad.backward(loss)

    return [("train fwd+bwd batch 4", time_call(step, repeats))]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    paths = ["numpy"]
    if backend._HAVE_NUMBA:
        paths.append("numba")
    else:
        print("numba unavailable; timing the numpy path only")

    results = {}
    for path in paths:
        previous = backend.set_numba(path == "numba")
        try:
            results[path] = dict(bench_primitives(args.repeats)
                                 + bench_train_step(args.repeats))
        finally:
            backend.set_numba(previous)

    width = max(len(k) for k in results[paths[0]])
    header = f"{'case':<{width}}  " + "  ".join(f"{p:>10}" for p in paths)
    if len(paths) == 2:
        header += "  numba/numpy"
    print(header)
    for case in results[paths[0]]:
        line = f"{case:<{width}}  " + "  ".join(
            f"{results[p][case] * 1e3:>8.2f}ms" for p in paths)
        if len(paths) == 2:
            line += f"  {results['numba'][case] / results['numpy'][case]:>10.2f}x"
        print(line)


if __name__ == "__main__":
    main()
