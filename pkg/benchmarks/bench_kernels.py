"""Time the compiled and numpy tile-pass kernels on the same MatMuls.

    python benchmarks/bench_kernels.py [--repeat 3] [--sizes 32,64,128]

Each kernel runs the engine in sparse and dense mode; results are checked
for equality before timings are reported.
"""

import argparse
import time

import numpy as np

from stasim.dmme.backend import KERNELS
from stasim.dmme.engine import EngineGeometry, Mode, run_matmul
from stasim.nmformat import NmConfig, compress, random_nm_matrix


def _time(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--sizes", default="32,64,128", help="square J=K=L sizes")
    parser.add_argument("--nm", default="2:8")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    nm = NmConfig.parse(args.nm)
    g = EngineGeometry.default(nm)
    rng = np.random.default_rng(args.seed)
    if "cython" not in KERNELS:
        print("compiled kernel not built; only the numpy kernel is timed")
    print(f"geometry {g}, pattern {nm}, best of {args.repeat}")
    print(f"{'size':>6} {'mode':>7} " + " ".join(f"{k + ' s':>10}" for k in sorted(KERNELS)) + "   speedup")
    for size in (int(s) for s in args.sizes.split(",")):
        a = rng.integers(-512, 512, size=(size, size))
        w = random_nm_matrix(rng, size, size, nm) // 16
        operands = {Mode.SPARSE_DENSE: compress(w, nm), Mode.DENSE_DENSE: w}
        for mode, b in operands.items():
            times, results = {}, {}
            for name in sorted(KERNELS):
                times[name], res = _time(lambda: run_matmul(mode, a, b, g, KERNELS[name]), args.repeat)
                results[name] = res.result
            first = next(iter(results.values()))
            assert all(np.array_equal(first, r) for r in results.values()), "kernels disagree"
            ratio = times["python"] / times["cython"] if "cython" in times else 1.0
            cols = " ".join(f"{times[k]:10.4f}" for k in sorted(KERNELS))
            print(f"{size:6d} {mode.value:>7} {cols}   {ratio:6.1f}x")


if __name__ == "__main__":
    main()
