"""Compiled vs numpy kernels: agreement and wall-clock per call.

    python benchmarks/bench_kernels.py [--repeats 20]
"""
import argparse
import time

import numpy as np

from bmax import _pykernels, kernels
from bmax.envs import PointMass2D


def best_of(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    try:
        from bmax import _ckernels
    except ImportError:
        print("compiled extension not built; only the numpy kernels are available")
        return
    rng = np.random.default_rng(0)
    means = rng.normal(size=(4096, 8, 4))
    vars_ = rng.uniform(0.01, 1.0, size=means.shape)
    env = PointMass2D()
    lo, hi = np.array(env.bounds).T
    S = np.hstack([rng.uniform(lo, hi, (4096, 2)), rng.normal(0, 0.3, (4096, 2))])
    A = rng.uniform(-1, 1, (4096, 2))
    noise = rng.normal(size=(4096, 4)) * 0.01
    a = env.arena
    geom = (env.dt, env.drag, env.vmax, a.x_lo, a.x_hi, a.y_lo, a.y_hi, a.w_lo, a.w_hi,
            a.g_lo, a.g_hi)
    cases = {
        "renyi2_logsum (4096x8x4)": (lambda m: m.renyi2_logsum(means, vars_)),
        "pointmass_step (4096)": (lambda m: m.pointmass_step(S, A, noise, *geom)),
    }
    print(f"dispatch backend: {kernels.BACKEND}")
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, call in cases.items():
        diff = np.abs(np.asarray(call(_pykernels)) - np.asarray(call(_ckernels))).max()
        tp = best_of(lambda: call(_pykernels), args.repeats)
        tc = best_of(lambda: call(_ckernels), args.repeats)
        print(f"{name:28s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
