"""Compiled vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--points 16384] [--repeat 5]

Runs each kernel on both backends, checks that they agree, and prints the
best-of-N time in milliseconds.
"""

import argparse
import time

import numpy as np

from nerfcl import kernels
from nerfcl.field import HashGridConfig


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * min(times)


def cases(n_points, rng):
    cfg = HashGridConfig()
    res = np.asarray(cfg.resolutions, dtype=np.int64)
    dense = cfg.dense
    tables = rng.uniform(-1, 1, (cfg.levels, cfg.table_size, cfg.features_per_level)).astype(np.float32)
    x = rng.random((n_points, 3)).astype(np.float32)
    dfeat = rng.standard_normal((n_points, cfg.output_dim)).astype(np.float32)
    n_rays, n_samp = max(1, n_points // 32), 32
    colors = rng.random((n_rays, n_samp, 3)).astype(np.float32)
    sigmas = rng.exponential(1.0, (n_rays, n_samp)).astype(np.float32)
    deltas = np.full((n_rays, n_samp), 0.05, dtype=np.float32)
    bg = np.zeros(3, dtype=np.float32)
    drgb = rng.standard_normal((n_rays, 3)).astype(np.float32)

    def enc_fwd(ext):
        return lambda: ext.hash_encode_fwd(x, tables, res, dense)

    def enc_bwd(ext):
        def run():
            g = np.zeros_like(tables)
            ext.hash_encode_bwd(x, dfeat, g, res, dense)
            return g
        return run

    def comp_fwd(ext):
        return lambda: ext.composite_fwd(colors, sigmas, deltas, bg)

    def comp_bwd(ext):
        _, w, tr = kernels.py_composite_fwd(colors, sigmas, deltas, bg)
        return lambda: ext.composite_bwd(drgb, colors, deltas, w, tr, bg)

    return [("hash_encode_fwd", enc_fwd), ("hash_encode_bwd", enc_bwd),
            ("composite_fwd", comp_fwd), ("composite_bwd", comp_bwd)]


class _Python:
    hash_encode_fwd = staticmethod(kernels.py_hash_encode_fwd)
    composite_fwd = staticmethod(kernels.py_composite_fwd)
    composite_bwd = staticmethod(kernels.py_composite_bwd)

    @staticmethod
    def hash_encode_bwd(x, dfeat, grad, res, dense):
        kernels.py_hash_encode_bwd(x, dfeat, grad, res, dense)


def _flatten(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=16384)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8} {'max diff':>10}")
    for name, make in cases(args.points, rng):
        py_fn = make(_Python)
        t_py = best_of(py_fn, args.repeat)
        if kernels._ext is None:
            print(f"{name:<18} {t_py:>10.2f} {'-':>12} {'-':>8} {'-':>10}")
            continue
        cy_fn = make(kernels._ext)
        t_cy = best_of(cy_fn, args.repeat)
        diff = float(np.max(np.abs(_flatten(py_fn()).astype(np.float64) - _flatten(cy_fn()))))
        print(f"{name:<18} {t_py:>10.2f} {t_cy:>12.2f} {t_py / t_cy:>7.1f}x {diff:>10.1e}")


if __name__ == "__main__":
    main()
