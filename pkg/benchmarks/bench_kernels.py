"""Time the numba loop kernels against the numpy kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

The per-kernel table calls both implementations directly. The iteration
timings run the dispatching kernels in a fresh interpreter per backend so
the GRADINV_DISABLE_NUMBA switch takes effect.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gradinv import kernels

CASES = [
    # (B, C, d, h, k, s, p)
    (1, 1, 8, 2, 3, 2, 1),
    (1, 3, 32, 12, 5, 2, 2),
    (4, 3, 32, 12, 5, 2, 2),
    (1, 3, 64, 16, 5, 1, 2),
]

ITER_SNIPPET = """
import time, numpy as np
from gradinv import kernels
from gradinv.models import CnnConfig, init_params
from gradinv.recon import DeconvolutionObjective
for cfg in (CnnConfig(1, 8, 3, 1, 2, 4, 4, 10), CnnConfig(3, 32, 5, 2, 2, 12, 4, 10)):
    w = init_params(cfg, 1)
    x = np.random.default_rng(0).uniform(size=(1,) + cfg.input_shape)
    obj = DeconvolutionObjective(cfg, w, np.zeros(cfg.n0))
    obj(x, None, 0.0)
    t = time.perf_counter()
    for _ in range(200):
        obj(x, None, 0.0)
    print(kernels.BACKEND, cfg.channels, cfg.input_width, (time.perf_counter() - t) / 200)
"""


def _best(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    return min(timeit.repeat(fn, number=5, repeat=repeat)) / 5


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for B, C, d, h, k, s, p in CASES:
        dp = kernels.out_width(d, k, p, s)
        x = rng.standard_normal((B, C, d, d))
        w = rng.standard_normal((h, C, k, k))
        g = rng.standard_normal((B, h, dp, dp))
        pairs = {
            "forward": (lambda: kernels.conv2d_numpy(x, w, s, p), lambda: kernels.conv2d_numba(x, w, s, p)),
            "input-grad": (
                lambda: kernels.conv2d_input_grad_numpy(g, w, s, p, d),
                lambda: kernels.conv2d_input_grad_numba(g, w, s, p, d),
            ),
            "kernel-grad": (
                lambda: kernels.conv2d_kernel_grad_numpy(x, g, s, p, k),
                lambda: kernels.conv2d_kernel_grad_numba(x, g, s, p, k),
            ),
        }
        for name, (f_np, f_nb) in pairs.items():
            assert np.allclose(f_np(), f_nb(), atol=1e-10)
            t_np, t_nb = _best(f_np, repeat), _best(f_nb, repeat)
            rows.append((f"{B}x{C}x{d}x{d} h={h} k={k} s={s}", name, t_np, t_nb))
    return rows


def bench_iteration():
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, GRADINV_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", ITER_SNIPPET], env=env, capture_output=True, text=True, check=True)
        for line in res.stdout.splitlines():
            backend, c, d, secs = line.split()
            out[(f"{c}x{d}x{d}", backend)] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "numba":
        print("numba disabled or missing; the numba column times the plain Python loops")
    print(f"{'case':<28} {'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for case, name, t_np, t_nb in bench_kernels(args.repeat):
        print(f"{case:<28} {name:<12} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>8.2f}")
    it = bench_iteration()
    print()
    for (shape, backend), secs in sorted(it.items()):
        print(f"deconvolution iteration, input {shape}, {backend} backend: {1e3 * secs:.3f} ms")


if __name__ == "__main__":
    main()
