"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 96]

The first numba call includes JIT compilation and is reported separately.
"""
import argparse
import time

import numpy as np

from lesionsynth._kernels import numba_backend, numpy_backend


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, rng):
    vol = rng.uniform(size=(size, size, size // 4))
    n = vol.size
    coords = rng.uniform(-1, np.array(vol.shape)[:, None], size=(3, n))
    g = rng.uniform(size=(size // 2, size // 2, size // 8))
    r = np.clip(g + rng.normal(0, 0.1, size=g.shape), 0, None)
    centers = np.argwhere(np.ones(g.shape, bool))
    return {
        "trilinear_sample": lambda b: b.trilinear_sample(vol, coords),
        "nearest_sample": lambda b: b.nearest_sample(vol, coords),
        "windowed_ssim(7)": lambda b: b.windowed_ssim(g, r, centers, 3, 1e-4, 9e-4),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--size", type=int, default=96)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20}{'numpy [s]':>12}{'numba jit [s]':>15}{'numba [s]':>12}{'speedup':>10}")
    for name, call in cases(args.size, rng).items():
        t_np = best_of(lambda: call(numpy_backend), args.repeat)
        if numba_backend is None:
            print(f"{name:<20}{t_np:>12.4f}{'n/a':>15}{'n/a':>12}{'n/a':>10}")
            continue
        t0 = time.perf_counter()
        a = call(numba_backend)
        t_jit = time.perf_counter() - t0
        t_nb = best_of(lambda: call(numba_backend), args.repeat)
        if not np.allclose(a, call(numpy_backend), rtol=1e-9, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<20}{t_np:>12.4f}{t_jit:>15.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
