"""Time the compiled and pure-Python kernel backends on typical workloads.

    python benchmarks/bench_kernels.py [--repeat 5]

Checks that both backends agree before timing them.
"""

import argparse
import timeit

import numpy as np

from semiseg3d import data, kernels
from semiseg3d.patches import plan_grid


def workloads(rng):
    grid = plan_grid((64, 64, 64), 32, 8)
    patches = rng.random((len(grid), 32, 32, 32, 4))

    def stitch(backend):
        prob_sum = np.zeros((64, 64, 64, 4))
        count = np.zeros((64, 64, 64), dtype=np.int64)
        kernels.stitch_accumulate(prob_sum, count, patches, grid.origins, backend=backend)
        return prob_sum

    noisy = rng.random((96, 96, 96)) < 0.3
    smooth = data.generate_phantom(0, 96)[1].labels == 2
    sparse = rng.random((96, 96, 96)) < 0.01
    return {
        "stitch 125 x 32^3 x 4 into 64^3": stitch,
        "boundary 96^3 label mask": lambda b: kernels.boundary_mask(smooth, backend=b),
        "boundary 96^3 random noise": lambda b: kernels.boundary_mask(noisy, backend=b),
        "squared EDT 96^3": lambda b: kernels.edt_squared(sparse, (1.0, 1.2, 0.8), backend=b),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    try:
        from semiseg3d import _ckernels  # noqa: F401
    except ImportError:
        print("compiled extension not built; only the python backend is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'workload':34s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}")
    for name, fn in workloads(rng).items():
        np.testing.assert_allclose(fn("cython"), fn("python"), rtol=1e-12, atol=1e-9)
        times = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3
                 for b in ("cython", "python")}
        print(f"{name:34s} {times['cython']:10.1f} {times['python']:10.1f} {times['python'] / times['cython']:7.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
