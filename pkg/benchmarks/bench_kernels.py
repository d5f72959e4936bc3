"""Timing comparison of the numba kernels against the pure-numpy fallback.

Run directly: python benchmarks/bench_kernels.py [--repeats N]
The numba path must be active (do not set INCDET_NO_NUMBA); the fallback is
called through the private reference functions so both run in one process.
"""
import argparse
import time

import numpy as np

from incdet import kernels


def _random_boxes(rng, n, extent=16.0):
    x0 = rng.uniform(0, extent - 1, size=n)
    y0 = rng.uniform(0, extent - 1, size=n)
    w = rng.uniform(0.5, 5.0, size=n)
    h = rng.uniform(0.5, 5.0, size=n)
    return np.stack([x0, y0, np.minimum(x0 + w, extent), np.minimum(y0 + h, extent)], axis=1)


def _time(fn, args, repeats):
    fn(*args)  # warmup / jit compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    if kernels.BACKEND != "numba":
        print("warning: numba backend inactive, comparing numpy against itself")

    rng = np.random.default_rng(0)
    a = _random_boxes(rng, 1536)  # full anchor set size
    b = _random_boxes(rng, 4)
    scores = rng.uniform(size=len(a))
    masks_a = rng.integers(0, 2, size=(100, 16, 16)).astype(np.uint8)
    masks_b = rng.integers(0, 2, size=(100, 16, 16)).astype(np.uint8)

    cases = [
        ("box_iou_matrix 1536x4", kernels.box_iou_matrix, kernels._box_iou_matrix_np, (a, b)),
        ("box_iou_matrix 1536x1536", kernels.box_iou_matrix, kernels._box_iou_matrix_np, (a, a)),
        ("nms_keep 1536 @0.5", kernels.nms_keep, kernels._nms_keep_np, (a, scores, 0.5)),
        ("mask_iou_pairs 100x16x16", kernels.mask_iou_pairs, kernels._mask_iou_pairs_np,
         (masks_a, masks_b)),
    ]
    print(f"{'kernel':<26}{'numba':>12}{'numpy':>12}{'speedup':>9}")
    for name, fast, ref, arg in cases:
        t_fast = _time(fast, arg, args.repeats)
        t_ref = _time(ref, arg, args.repeats)
        print(f"{name:<26}{t_fast * 1e6:>10.1f}us{t_ref * 1e6:>10.1f}us{t_ref / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
