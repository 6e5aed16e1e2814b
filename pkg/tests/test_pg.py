"""Polya-Gamma sampler moments and input validation."""

from __future__ import annotations

import numpy as np
import pytest

from dnabiomass.pg import pg_vector, polya_gamma_sample


def test_zero_tilt_mean():
    rng = np.random.Generator(np.random.PCG64(0))
    draws = pg_vector(np.zeros(1_000_000), rng)
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - 0.25) <= 3.0 * se
    # Var(PG(1, 0)) = 1/24.
    assert draws.var() == pytest.approx(1.0 / 24.0, rel=0.02)


def test_tilted_mean():
    rng = np.random.Generator(np.random.PCG64(1))
    draws = pg_vector(np.full(1_000_000, 2.0), rng)
    target = np.tanh(1.0) / 4.0
    assert target == pytest.approx(0.19040, abs=5e-6)
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - target) <= 3.0 * se


def test_negative_tilt_matches_positive():
    rng = np.random.Generator(np.random.PCG64(2))
    draws = pg_vector(np.full(200_000, -3.0), rng)
    target = np.tanh(1.5) / 6.0
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - target) <= 3.0 * se


def test_draws_strictly_positive():
    rng = np.random.Generator(np.random.PCG64(3))
    tilts = rng.uniform(-8.0, 8.0, 50_000)
    draws = pg_vector(tilts, rng)
    assert np.all(draws > 0.0)
    assert np.all(np.isfinite(draws))


def test_scalar_shape_parameter_sums():
    rng = np.random.Generator(np.random.PCG64(4))
    draws = np.array(
        [polya_gamma_sample(2, 1.0, rng) for _ in range(20_000)]
    )
    # E[PG(b, c)] = b/(2c) tanh(c/2).
    target = 2.0 / 2.0 * np.tanh(0.5)
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - target) <= 3.0 * se


def test_scalar_validates_shape():
    rng = np.random.Generator(np.random.PCG64(5))
    with pytest.raises(ValueError):
        polya_gamma_sample(0, 1.0, rng)
    with pytest.raises(ValueError):
        polya_gamma_sample(1.5, 1.0, rng)
    with pytest.raises(ValueError):
        polya_gamma_sample(1, np.inf, rng)
