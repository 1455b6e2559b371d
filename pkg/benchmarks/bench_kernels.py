"""Benchmark: compiled chain kernels vs the pure-Python fallback.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from shiplearn import _chains_py, kernels
from shiplearn.randcore import SeededStream, gamma_array, normal_array


def bench(label, fn, args, repeats):
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def main():
    if not kernels.USING_COMPILED:
        print("compiled extension not importable; benchmarking the fallback "
              "against itself is pointless. Build with `pip install -e .`.")
        return

    stream = SeededStream(123)
    n_routes, total, burnin = 4, 1000, 500
    gen = stream.child("stats").generator()
    nj = gen.integers(1, 12, n_routes).astype(float)
    qbar = gen.normal(0, 2, n_routes)
    ssj = gen.uniform(0, 40, n_routes)
    z = normal_array(stream.child("z"), (total, n_routes + 1))
    g_sigma = gamma_array(stream.child("gs"), 1.05 + 0.5 * nj.sum(), total)
    g_xi = gamma_array(stream.child("gx"), 1.05 + 0.5 * n_routes, total)
    args = (nj, qbar, ssj, np.zeros(n_routes), 0.0, 200.0, 60.0,
            10.0, 0.0, 900.0, 3.0, z, g_sigma, g_xi, burnin)

    # one update = one belief revision; a full fit runs tens of thousands
    updates_per_fit = 25_000
    rows = []
    for label, module in (("compiled", kernels), ("pure python", _chains_py)):
        repeats = 200 if module is kernels else 20
        per_update = bench(label, module.hier_simple_chain, args, repeats)
        rows.append((label, per_update))
    print(f"hierarchical chain, {n_routes} routes, {total} draws per update:")
    for label, per_update in rows:
        print(f"  {label:12s} {per_update * 1e3:8.3f} ms/update "
              f"(~{per_update * updates_per_fit:6.1f} s per {updates_per_fit:,}-update fit)")
    speedup = rows[1][1] / rows[0][1]
    print(f"  speedup: {speedup:.1f}x")

    parity = [np.array_equal(a, b) for a, b in zip(
        kernels.hier_simple_chain(*args), _chains_py.hier_simple_chain(*args))]
    print(f"  bit-identical outputs: {all(parity)}")


if __name__ == "__main__":
    main()
