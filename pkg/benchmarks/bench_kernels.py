"""Time the compiled and pure-Python kernels on the same inputs.

Run from the repository root::

    python benchmarks/bench_kernels.py [--repeat 5] [--n 20000]

Prints the best wall time per kernel and backend, the speedup, and the
largest absolute difference between the two backends' outputs.
"""

import argparse
import timeit

import numpy as np

from otbump._kernels import backends
from otbump.bumphunt import (
    DEFAULT_TOL,
    MASS_FLOOR,
    SignalRegionSpec,
    basis_interval_masses,
    bin_data,
)
from otbump.estimators import KERNEL_CUTOFF


def _cases(n, rng):
    # both backends expect training pairs sorted by mass
    m = np.sort(rng.uniform(0, 1, n))
    z = rng.beta(1 + 4 * m, 3)
    zq = rng.uniform(0, 1, n)
    mq = rng.uniform(0, 1, n)
    counts = bin_data(rng.exponential(1 / 3, 20_000).clip(0, 1), SignalRegionSpec(0.45, 0.55), 50)
    K = 20
    phi = np.hstack([basis_interval_masses(K, counts.lower_edges),
                     basis_interval_masses(K, counts.upper_edges)])
    em_args = (phi, counts.probabilities, phi.sum(axis=1), np.ones(K + 1), 2000, DEFAULT_TOL,
               MASS_FLOOR, False)
    return {
        "kernel_ccdf": lambda mod: mod.kernel_ccdf(m, z, zq, mq, 0.05, 0.05, KERNEL_CUTOFF)[0],
        "kernel_nw": lambda mod: mod.kernel_nw(m, z, mq, 0.05, KERNEL_CUTOFF)[0],
        "dagostini": lambda mod: mod.dagostini(*em_args)[0],
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=20_000)
    args = ap.parse_args(argv)

    found = backends()
    if "cython" not in found:
        print("compiled extension not built; only the python backend is available")
    cases = _cases(args.n, np.random.default_rng(0))
    print(f"{'kernel':<12} {'backend':<8} {'best (s)':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in cases.items():
        times, outputs = {}, {}
        for backend, mod in found.items():
            outputs[backend] = fn(mod)
            times[backend] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        diff = (float(np.max(np.abs(outputs["python"] - outputs["cython"])))
                if len(outputs) == 2 else float("nan"))
        for backend, t in times.items():
            speed = times["python"] / t
            print(f"{name:<12} {backend:<8} {t:>10.4f} {speed:>7.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
