"""Time the compiled kernels against the numpy fallback on desk-scale shapes.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel: best-of-N milliseconds for each backend, the
speed-up, and whether the outputs are bit-identical.
"""
import argparse
import timeit

import numpy as np

from wstrack import _fallback

try:
    from wstrack import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    # first stage conv of the desk backbone: 8 frames, 8 channels, 3x3, stride 1
    x = rng.standard_normal((8, 8, 26, 34))
    cols = _fallback.im2col(x, 3, 3, 1, 24, 32)
    heat = rng.random((64, 64))
    blob = np.zeros((64, 64), np.uint8)
    blob[10:50, 5:40] = 1
    yield "im2col 8x8x26x34 k3", lambda m: m.im2col(x, 3, 3, 1, 24, 32)
    yield "col2im 8x8x26x34 k3", lambda m: m.col2im(cols, 8, 8, 26, 34, 3, 3, 1, 24, 32)
    yield "dilate_disc 64x64 r12", lambda m: m.dilate_disc(heat, 12)
    yield "erode_disc 64x64 r12", lambda m: m.erode_disc(heat, 12)
    yield "flood_fill8 64x64", lambda m: m.flood_fill8(blob, 20, 20)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'python ms':>11}{'cython ms':>11}{'speed-up':>10}  identical")
    for name, fn in cases(rng):
        times = {}
        for label, mod in (("python", _fallback), ("cython", _kernels)):
            t = timeit.Timer(lambda: fn(mod))
            n, _ = t.autorange()
            times[label] = min(t.repeat(args.repeat, n)) / n * 1e3
        same = np.array_equal(np.asarray(fn(_fallback)), np.asarray(fn(_kernels)))
        print(f"{name:<24}{times['python']:>11.3f}{times['cython']:>11.3f}"
              f"{times['python'] / times['cython']:>9.2f}x  {same}")


if __name__ == "__main__":
    main()
