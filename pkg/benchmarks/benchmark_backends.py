"""Timing comparison between the compiled and pure-Python kernel backends.

Runs the three deterministic kernels on identical pre-drawn inputs and the
Polya-Gamma sampler on a matched batch, then times a short end-to-end chain
under each backend. Invoke directly:

    python3 benchmarks/benchmark_backends.py [--iters N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from dnabiomass import ChainConfig, SimSettings, run_chain, simulate_dataset
from dnabiomass import _kernels_py

try:
    from dnabiomass import _kernels
except ImportError:
    _kernels = None


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _exp_family_inputs(rng, n):
    return (
        rng.normal(2.0, 1.5, n),
        rng.uniform(0.2, 3.0, n),
        rng.normal(0.0, 2.0, n),
        rng.uniform(-5.0, 20.0, n),
        rng.uniform(0.0, 50.0, n),
        rng.standard_normal(n),
        np.log(rng.random(n)),
    )


def _factor_pair_inputs(rng, n):
    return (
        rng.normal(1.0, 1.0, n),
        rng.normal(0.0, 0.5, n),
        rng.uniform(0.3, 4.0, n),
        rng.normal(0.0, 1.0, n),
        rng.uniform(0.5, 3.0, n),
        rng.uniform(-2.0, 10.0, n),
        rng.uniform(0.0, 30.0, n),
        rng.uniform(-2.0, 10.0, n),
        rng.uniform(0.0, 30.0, n),
        rng.standard_normal(n),
        rng.standard_normal(n),
        np.log(rng.random(n)),
    )


def _lbar_inputs(rng, n, n_sp, m):
    start = np.arange(n + 1, dtype=np.int64) * m
    n_samp = n * m
    row_solves = rng.normal(0.0, 0.2, (n, n))
    np.fill_diagonal(row_solves, 0.0)
    col_solves = rng.normal(0.0, 0.2, (n_sp, n_sp))
    np.fill_diagonal(col_solves, 0.0)
    w_data = rng.uniform(0.0, 6.0, (n, n_sp))
    return dict(
        prior_mean=rng.normal(5.0, 0.5, (n, n_sp)),
        row_solves=row_solves,
        row_scalars=rng.uniform(0.3, 1.2, n),
        col_solves=col_solves,
        col_scalars=rng.uniform(0.3, 1.2, n_sp),
        w_data=w_data,
        lin_data=w_data * rng.normal(5.0, 1.0, (n, n_sp)),
        phi1=rng.uniform(0.5, 2.0, n_sp),
        base=rng.normal(-1.0, 1.0, (n_samp, n_sp)),
        delta=rng.integers(0, 2, (n_samp, n_sp)).astype(float),
        active=np.ones(n_samp),
        site_sample_start=start,
        z=rng.standard_normal((n, n_sp)),
        log_u=np.log(rng.random((n, n_sp))),
    )


def run(iters: int) -> None:
    if _kernels is None:
        print("compiled backend unavailable; only timing the Python lane")
    lanes = {"python": _kernels_py}
    if _kernels is not None:
        lanes["cython"] = _kernels

    rng = np.random.default_rng(0)
    batch = 4000
    exp_args = _exp_family_inputs(rng, batch)
    pair_args = _factor_pair_inputs(rng, batch)
    scan_kwargs = _lbar_inputs(rng, 40, 10, 3)
    L0 = rng.normal(5.0, 1.0, (40, 10))
    pg_c = rng.uniform(0.1, 8.0, batch)

    print(f"kernel timings (best of {iters}, batch {batch})")
    for name, mod in lanes.items():
        t = _time(lambda: mod.exp_family_laplace(*exp_args), iters)
        print(f"  exp_family_laplace  {name:7s} {t * 1e3:8.2f} ms")
    for name, mod in lanes.items():
        t = _time(lambda: mod.factor_pair_laplace(*pair_args), iters)
        print(f"  factor_pair_laplace {name:7s} {t * 1e3:8.2f} ms")
    for name, mod in lanes.items():
        def scan():
            L = np.ascontiguousarray(L0.copy())
            mod.lbar_scan(L, **scan_kwargs)
        t = _time(scan, iters)
        print(f"  lbar_scan           {name:7s} {t * 1e3:8.2f} ms")
    for name, mod in lanes.items():
        def pg():
            mod.pg_draws(pg_c, np.random.default_rng(1))
        t = _time(pg, iters)
        print(f"  pg_draws            {name:7s} {t * 1e3:8.2f} ms")

    settings = SimSettings(n_sites=10, m_samples=2, k_pcr=2, n_species=4,
                           n_spikes=1, n_site_covariates=1)
    dataset, _ = simulate_dataset(settings, 3)
    config = ChainConfig(n_iter=200, n_burnin=100, seed=1)
    print("end-to-end chain (200 sweeps, 10 sites, 4 species)")
    import dnabiomass.engine as engine_mod
    import dnabiomass.updates as updates_mod
    for name, mod in lanes.items():
        engine_mod.kernels = mod
        updates_mod.kernels = mod
        start = time.perf_counter()
        run_chain(dataset, config=config)
        elapsed = time.perf_counter() - start
        print(f"  chain               {name:7s} {elapsed:8.2f} s")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iters", type=int, default=3,
                        help="repeats per kernel timing (best is reported)")
    args = parser.parse_args()
    run(args.iters)


if __name__ == "__main__":
    main()
