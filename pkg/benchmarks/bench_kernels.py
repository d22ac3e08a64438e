"""Compiled kernels against their numpy twins on realistic inputs.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time of each backend and
the speedup.  Results are checked for agreement before timing.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from gsketch import _fallback
from gsketch.estimator import verify_inputs
from gsketch.generators import gaussian
from gsketch.gsampler import N_CLASSES, SamplerBank, SamplerConfig
from gsketch.hashing import MERSENNE61

try:
    from gsketch import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def hash_case(rng):
    coeffs = rng.integers(1, MERSENNE61, size=(8, 4), dtype=np.uint64)
    rows = rng.integers(0, 8, size=200_000).astype(np.int64)
    xs = rng.integers(0, 1 << 40, size=200_000).astype(np.uint64)
    return (coeffs, rows, xs), lambda mod, a: mod.poly_hash(*a)


def accumulator_case(rng):
    keys = rng.integers(0, 50_000, size=100_000).astype(np.int64)
    vals = rng.standard_normal((100_000, 12))

    def run(mod, args):
        acc = mod.SparseAccumulator(12, 64)
        for lo in range(0, len(keys), 10_000):
            acc.add(keys[lo:lo + 10_000], vals[lo:lo + 10_000])
        k, v = acc.export()
        order = np.argsort(k)
        return k[order], v[order]

    return (), run


def query_case(rng):
    """Inputs of the two query kernels, taken from a 16-instance bank at a random x."""
    d, n = 4, 4096
    A, b = gaussian(n, d, seed=1)
    bank = SamplerBank(SamplerConfig(d=d, n=n, c_rep=1.0), seed=2, n_instances=16)
    bank.insert_all(np.arange(n), A, b)
    bank.freeze()
    x = rng.standard_normal(d)
    cells, ids, raw1, raw2, aug = bank._reports(x, None)
    ext = np.append(x, -1.0)
    norms = _fallback.median_norms(raw1, ext, d)
    inst = cells // bank.cpi
    local = cells % bank.cpi
    group = inst * N_CLASSES + local // bank.n_sub
    _, vargs = verify_inputs(norms, local % bank.n_sub + 1, group, bank.boundary_shift[inst], bank.alpha, n, bank.n_levels,
                             c_depth=bank.config.c_depth)
    return (raw1, ext, d), vargs


def agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind == "f":
        return np.allclose(a, b, rtol=1e-12, atol=1e-12)
    return np.array_equal(a, b)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if _kernels is None:
        raise SystemExit("compiled kernels not built; run `pip install --no-build-isolation -e .`")
    rng = np.random.default_rng(0)
    cases = {}
    cases["poly_hash"] = hash_case(rng)
    cases["SparseAccumulator"] = accumulator_case(rng)
    mn_args, vg_args = query_case(rng)
    cases["median_norms"] = (mn_args, lambda mod, a: mod.median_norms(*a))
    cases["verify_guesses"] = (vg_args, lambda mod, a: mod.verify_guesses(*a))
    print(f"{'kernel':<20}{'cython [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, (a, run) in cases.items():
        if not agree(run(_kernels, a), run(_fallback, a)):
            raise SystemExit(f"{name}: backends disagree")
        fast = best_of(lambda: run(_kernels, a), args.repeat)
        slow = best_of(lambda: run(_fallback, a), args.repeat)
        print(f"{name:<20}{fast * 1e3:>12.2f}{slow * 1e3:>12.2f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
