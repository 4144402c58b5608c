"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from nqr import _kernels_py

try:
    from nqr import _kernels
except ImportError:
    _kernels = None


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_bilinear(mod, repeat, rng):
    img = rng.random((600, 900))
    xs = rng.uniform(-2, 902, 200_000)
    ys = rng.uniform(-2, 602, 200_000)
    return _best(lambda: mod.bilinear_sample(img, xs, ys), repeat)


def bench_mog(mod, repeat, rng, n=200_000, frames=5):
    seq = rng.random((frames, n))

    def run():
        means = np.zeros((3, n))
        means[0] = seq[0]
        variances = np.full((3, n), 0.01)
        weights = np.zeros((3, n))
        weights[0] = 1.0
        for f in seq:
            mod.mog_update(means, variances, weights, f, 0.05, 2.5, 0.7, 0.01, 1e-4)

    return _best(run, repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = [("python", _kernels_py)] + ([("cython", _kernels)] if _kernels else [])
    if _kernels is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for label, bench in (("bilinear_sample (200k pts)", bench_bilinear),
                         ("mog_update (200k px x 5)", bench_mog)):
        times = [bench(mod, args.repeat, np.random.default_rng(0)) for _, mod in backends]
        speed = f"{times[0] / times[1]:10.1f}x" if len(times) > 1 else ""
        print(f"{label:<28}" + "".join(f"{t * 1e3:10.1f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
