"""Time the numba kernels against their numpy fallbacks.

Both code paths are called directly, so one process measures both no
matter how S2N_NUMBA is set.  Shapes follow the desk-scale network
(64x64 slices, batch 16 x 8 slices).

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from scan2num import _accel, kernels as K


def cases(rng):
    imgs = rng.uniform(-1, 1, (128, 64, 64)).astype(np.float32)
    x = rng.normal(size=(8, 128, 30, 30)).astype(np.float32)
    cols = K._im2col_np(x, 5, 1)
    pooled, arg = K._maxpool_fwd_np(x.reshape(-1, 30, 30), 2, 2)
    oh = K.pool_out_size(30, 2, 2)
    ang = rng.uniform(-np.pi / 4, np.pi / 4, 128)
    c, s = np.cos(ang), np.sin(ang)
    ys, xs = K._rotation_coords(64, 64, c, s)
    big = rng.uniform(-1, 1, (8, 200, 180)).astype(np.float32)
    sy, sx = K._grid_step(200, 64), K._grid_step(180, 64)
    gy = np.broadcast_to((np.arange(64) * sy)[None, :, None], (1, 64, 64))
    gx = np.broadcast_to((np.arange(64) * sx)[None, None, :], (1, 64, 64))
    ranks = rng.integers(0, 50, (2000, 195)).astype(np.float64)
    return {
        "im2col": (lambda: K._im2col_np(x, 5, 1), lambda: K._im2col_nb(x, 5, 1)),
        "col2im": (lambda: K._col2im_np(cols, x.shape, 5, 1), lambda: K._col2im_nb(cols, x.shape, 5, 1)),
        "maxpool_fwd": (lambda: K._maxpool_fwd_np(x.reshape(-1, 30, 30), 2, 2),
                        lambda: K._maxpool_fwd_nb(x.reshape(-1, 30, 30), 2, 2, oh, oh)),
        "maxpool_bwd": (lambda: K._maxpool_bwd_np(pooled, arg, (1024, 30, 30)),
                        lambda: K._maxpool_bwd_nb(pooled, arg, (1024, 30, 30))),
        "rotate": (lambda: K._bilinear_np(imgs, ys, xs, -1.0), lambda: K._rotate_nb(imgs, c, s, -1.0)),
        "resample": (lambda: K._bilinear_np(big, gy, gx, 0.0), lambda: K._resample_nb(big, 64, sy, sx)),
        "rank_rows": (lambda: K._rank_rows_np(ranks), lambda: K._rank_rows_nb(ranks)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    _accel.set_threads(1)
    print(f"{'kernel':<12} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (f_np, f_nb) in cases(np.random.default_rng(0)).items():
        f_nb()   # compile outside the timed region
        t_np = min(timeit.repeat(f_np, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(f_nb, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<12} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
