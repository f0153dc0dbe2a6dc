"""Time the numba and numpy kernel backends side by side.

    python benchmarks/bench_kernels.py [--repeat 5] [--step]

Kernel timings run both backends in one process.  ``--step`` also times one
full forward/backward pass of the cifar-robust preset per backend, each in a
fresh interpreter with ``ROBUSTCNN_KERNELS`` set.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from robustcnn._kernels import KERNELS

# (batch, channels, spatial, kernel, stride): CIFAR-scale and ImageNet-stage-3-like shapes
SHAPES = [(64, 32, 16, 11, 1), (64, 64, 8, 11, 1), (8, 384, 14, 11, 1), (8, 96, 56, 7, 2)]

STEP = """
import time, numpy as np
from robustcnn import tensor as T
from robustcnn.models import build_model, get_preset
from robustcnn.losses import cross_entropy
m = build_model(get_preset("cifar-robust").spec)
x = T.Tensor(np.random.default_rng(0).uniform(0, 1, (64, 3, 32, 32)))
def step():
    T.reset_tape(); m.zero_grad(); T.backward(cross_entropy(m(x), np.zeros(64, int)))
step()
t = time.perf_counter()
for _ in range({repeat}):
    step()
print((time.perf_counter() - t) / {repeat})
"""


def _best(fn, repeat: int) -> float:
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat: int) -> list[tuple[str, str, float, float]]:
    rows = []
    rng = np.random.default_rng(0)
    for n, c, hw, k, s in SHAPES:
        p = k // 2
        xp = rng.standard_normal((n, c, hw + 2 * p, hw + 2 * p)).astype(np.float32)
        w = rng.standard_normal((c, k, k)).astype(np.float32)
        ho = (hw + 2 * p - k) // s + 1
        g = rng.standard_normal((n, c, ho, ho)).astype(np.float32)
        shape = f"{n}x{c}x{hw}x{hw} k{k} s{s}"
        for name, args in (
            ("dw_forward", (xp, w, s, ho, ho)),
            ("dw_backward_input", (g, w, s, xp.shape[2], xp.shape[3])),
            ("dw_backward_weight", (g, xp, s, k)),
        ):
            t_np = _best(lambda: KERNELS["numpy"][name](*args), repeat)
            t_nb = _best(lambda: KERNELS["numba"][name](*args), repeat) if "numba" in KERNELS else float("nan")
            rows.append((name, shape, t_np, t_nb))

    xp = rng.standard_normal((64, 32, 34, 34)).astype(np.float32)
    out, arg = KERNELS["numpy"]["maxpool_forward"](xp, 3, 2, 16, 16)
    g = rng.standard_normal(out.shape).astype(np.float32)
    for name, args in (("maxpool_forward", (xp, 3, 2, 16, 16)), ("maxpool_backward", (g, arg, 3, 2, 34, 34))):
        t_np = _best(lambda: KERNELS["numpy"][name](*args), repeat)
        t_nb = _best(lambda: KERNELS["numba"][name](*args), repeat) if "numba" in KERNELS else float("nan")
        rows.append((name, "64x32x32x32 k3 s2", t_np, t_nb))
    return rows


def bench_step(repeat: int) -> dict[str, float]:
    times = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, ROBUSTCNN_KERNELS=backend)
        proc = subprocess.run(
            [sys.executable, "-c", STEP.format(repeat=repeat)], env=env, capture_output=True, text=True, check=True
        )
        times[backend] = float(proc.stdout.strip())
    return times


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = parser.parse_args()

    print(f"{'kernel':<20} {'shape':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, shape, t_np, t_nb in bench_kernels(args.repeat):
        print(f"{name:<20} {shape:<22} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:7.1f}x")
    if args.step:
        times = bench_step(args.repeat)
        print(
            f"\ncifar-robust step, batch 64: numpy {times['numpy']:.3f}s, numba {times['numba']:.3f}s "
            f"({times['numpy'] / times['numba']:.1f}x)"
        )


if __name__ == "__main__":
    main()
