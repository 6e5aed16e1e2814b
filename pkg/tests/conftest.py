"""Shared builders for the test suite.

Most tests need a small but fully structured survey (sites, samples, PCR
replicates, spike-ins, negative controls) plus a coherent model state.
The helpers here wrap the forward simulator and the prior sampler so each
test can request exactly the geometry it needs.
"""

from __future__ import annotations

import numpy as np

from dnabiomass import (
    HyperParams,
    SimSettings,
    build_context,
    simulate_dataset,
)
from dnabiomass.engine import prior_state


def rng_pair(seed: int):
    """Two generators with identical streams, for draw replication."""
    return (
        np.random.Generator(np.random.PCG64(seed)),
        np.random.Generator(np.random.PCG64(seed)),
    )


def small_survey(seed=0, hyper=None, **overrides):
    """Simulated survey and chain context at a small default size."""
    defaults = dict(n_sites=3, n_species=3, m_samples=2, k_pcr=2)
    defaults.update(overrides)
    settings = SimSettings(**defaults)
    dataset, truth = simulate_dataset(settings, seed)
    ctx = build_context(dataset, hyper if hyper is not None else HyperParams())
    return ctx, truth


def survey_state(ctx, seed=1, lam=None):
    """Prior draw of a full model state for the given survey."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if lam is None:
        lam = np.full(ctx.n_species, 7.0)
    return prior_state(ctx, rng, np.asarray(lam, dtype=float))


def batch_means_se(values: np.ndarray, n_batches: int = 50) -> float:
    """Monte Carlo standard error of a chain mean via batch means."""
    values = np.asarray(values, dtype=float)
    n = values.size
    batch = n // n_batches
    if batch < 2:
        raise ValueError("too few values for batch means")
    trimmed = values[: batch * n_batches].reshape(n_batches, batch)
    means = trimmed.mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))
