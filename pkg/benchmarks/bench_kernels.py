"""Compare the numba kernels with their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel: best-of-N wall time for each backend and the
speed-up. The first numba call (JIT compile or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from pkgnet.kernels import _numba, _numpy


def workloads(rng):
    frame = rng.random((3, 240, 360)).astype(np.float32)
    boxes = [(x, y, x + w, y + h) for x, y, w, h in zip(rng.uniform(0, 300, 256), rng.uniform(0, 180, 256),
                                                        rng.uniform(10, 60, 256), rng.uniform(10, 60, 256))]
    series = rng.normal(size=20_000)
    scores = np.round(rng.normal(size=200_000), 3)
    labels = rng.random(200_000) < 0.2

    def crops(mod):
        return lambda: [mod.crop_resize(frame, *b, 32, 32) for b in boxes]

    return {
        "crop_resize x256 (3x240x360 -> 32x32)": crops,
        "median_filter n=20k w=15": lambda mod: lambda: mod.median_filter(series, 15),
        "auroc n=200k": lambda mod: lambda: mod.auroc(scores, labels),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name, make in workloads(rng).items():
        f_np, f_nb = make(_numpy), make(_numba)
        f_nb()  # warm-up / compile
        t_np = min(timeit.repeat(f_np, number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(f_nb, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:40s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
