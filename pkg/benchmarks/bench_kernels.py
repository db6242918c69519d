"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends are called directly in one process, so the
``VSDLAB_DISABLE_NUMBA`` flag does not matter here.  The first numba call
(compilation) is excluded from the timings.
"""

import argparse
import timeit

import numpy as np

from vsdlab import _kernels


def iso_case(rng, B, n, m=2):
    return (rng.normal(size=(B, m)), rng.normal(size=(n, m)), rng.uniform(0.1, 1, B), rng.uniform(0.1, 1, B))


def gmm_case(rng, B, K=2, m=2):
    covs = np.stack([np.eye(m) * 0.25] * K)
    return (rng.normal(size=(B, m)), rng.uniform(0.1, 1, B), rng.uniform(0.1, 1, B), np.log(np.full(K, 1 / K)), rng.normal(size=(K, m)), covs)


def bench(label, fn_np, fn_nb, args, repeat):
    fn_nb(*args)
    t_np = min(timeit.repeat(lambda: fn_np(*args), number=1, repeat=repeat))
    t_nb = min(timeit.repeat(lambda: fn_nb(*args), number=1, repeat=repeat))
    print(f"{label:<34} numpy {t_np * 1e3:9.3f} ms   numba {t_nb * 1e3:9.3f} ms   speedup {t_np / t_nb:6.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    if not _kernels.HAS_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    for B, n in [(64, 64), (2048, 64), (2048, 2048), (10_000, 256)]:
        bench(f"iso_mixture B={B} n={n}", _kernels.iso_mixture_numpy, _kernels.iso_mixture_numba, iso_case(rng, B, n), args.repeat)
    for B in [64, 10_000, 100_000]:
        bench(f"gmm B={B} K=2", _kernels.gmm_numpy, _kernels.gmm_numba, gmm_case(rng, B), args.repeat)


if __name__ == "__main__":
    main()
