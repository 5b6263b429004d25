"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_backends.py
Requires numba (compile time is excluded by a warm-up call per kernel).
"""
import time

import numpy as np

import surfcrf as sc
from surfcrf import accel
from surfcrf.crf import window_offsets
from surfcrf.quadsphere import _location_tables


def timeit(fn, *args, repeats=5):
    fn(*args)  # warm-up (numba compilation / cache load)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def row(name, t_np, t_nb):
    speedup = t_np / t_nb if t_nb > 0 else float("inf")
    print(f"{name:<28} numpy {t_np * 1e3:9.2f} ms   numba {t_nb * 1e3:9.2f} ms"
          f"   speedup {speedup:6.1f}x")


def main():
    if not accel.HAVE_NUMBA:
        raise SystemExit("numba unavailable: nothing to compare "
                         "(the numpy path is already the active backend)")
    rng = np.random.default_rng(0)
    print("workload sizes follow the default pipeline (r=5, Z=48, R=3, 64^3 volume)\n")

    # trilinear gather: one full patch-set sampling worth of points
    data = rng.random((64, 64, 64))
    pts = rng.uniform(0, 63, size=(6 * 45 * 45 * 48, 3))
    origin = np.zeros(3)
    spacing = np.ones(3)
    row("trilinear_gather",
        timeit(accel.trilinear_gather_np, data, origin, spacing, pts),
        timeit(accel.trilinear_gather_nb, data, origin, spacing, pts))

    # point location: quad-sphere vertices against a mapped icosphere
    ico = sc.icosphere(4)
    smap = sc.harmonic_sphere_map(ico)
    inv, cent, cosb = _location_tables(smap)
    queries = sc.build_quadsphere(5).vertices
    row("locate_points",
        timeit(accel.locate_points_np, inv, cent, cosb, queries),
        timeit(accel.locate_points_nb, inv, cent, cosb, queries))

    # ray casting: ground-truth rays against the truth mesh
    origins = ico.vertices * 24.0 + 32.0
    dirs = ico.vertices
    verts = ico.vertices * 25.0 + 32.0
    row("raycast_min_abs_t",
        timeit(accel.raycast_min_abs_t_np, verts, ico.faces, origins, dirs),
        timeit(accel.raycast_min_abs_t_nb, verts, ico.faces, origins, dirs))

    # CRF window ops at inference scale
    offs = window_offsets(3)
    q = rng.random((6, 45, 45, 48))
    w = rng.random((6, 45, 45, len(offs)))
    row("window_sum (message pass)",
        timeit(accel.window_sum_np, q, w, offs),
        timeit(accel.window_sum_nb, q, w, offs))
    row("window_sum_adjoint",
        timeit(accel.window_sum_adjoint_np, q, w, offs),
        timeit(accel.window_sum_adjoint_nb, q, w, offs))
    row("window_weight_grad",
        timeit(accel.window_weight_grad_np, q, 2 * q, offs),
        timeit(accel.window_weight_grad_nb, q, 2 * q, offs))

    feat = rng.random((6, 45, 45, 48))
    valid = np.ones((6, 45, 45), dtype=bool)
    row("pairwise_weights",
        timeit(accel.pairwise_weights_np, feat, valid, offs, 0.02, 12.5, 0.02, 3.0),
        timeit(accel.pairwise_weights_nb, feat, valid, offs, 0.02, 12.5, 0.02, 3.0))

    # voxel parity fill of a predicted surface on the 64^3 grid
    tri = (sc.icosphere(4).vertices * 24.0 + 32.0)[sc.icosphere(4).faces]
    row("parity_diff (voxelize)",
        timeit(accel.parity_diff_np, tri, np.zeros(3), np.ones(3), (64, 64, 64)),
        timeit(accel.parity_diff_nb, tri, np.zeros(3), np.ones(3), (64, 64, 64)))


if __name__ == "__main__":
    main()
