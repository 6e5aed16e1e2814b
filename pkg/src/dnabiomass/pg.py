"""Exact Polya-Gamma sampling via the Devroye alternating-series method.

PG(b, c) is sampled as a sum of b draws of J*(1, c/2)/4, where J* is the
tilted Jacobi-type distribution. Candidates come from a two-piece proposal
(truncated inverse Gaussian below the cutoff 0.64, exponential tail above)
and are accepted through the alternating partial sums of the series density.
The scalar routine is the reference implementation; a masked vectorised
variant serves the sampler's batch updates in the pure-Python backend.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr

__all__ = ["polya_gamma_sample", "pg_vector"]

_TRUNC = 0.64
_MAX_SERIES = 200
_MAX_ROUNDS = 10000


def _series_coef(n: int, x: float) -> float:
    """Coefficient a_n(x) of the alternating series for the J* density."""
    h = n + 0.5
    if x <= _TRUNC:
        return (
            math.pi
            * h
            * (2.0 / (math.pi * x)) ** 1.5
            * math.exp(-2.0 * h * h / x)
        )
    return math.pi * h * math.exp(-0.5 * h * h * math.pi * math.pi * x)


def _exp_tail_mass(z: float) -> float:
    """Probability that the proposal draws from the exponential tail."""
    t = _TRUNC
    fz = math.pi * math.pi / 8.0 + z * z / 2.0
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + log_ndtr(b)
    xa = x0 + z + log_ndtr(a)
    if xb > 690.0 or xa > 690.0:
        return 0.0
    qdivp = 4.0 / math.pi * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


def _trunc_inv_gauss(z: float, rng: np.random.Generator) -> float:
    """Inverse Gaussian IG(1/z, 1) truncated to (0, 0.64]."""
    t = _TRUNC
    if z < 1.0 / t:
        # Mean above the cutoff: sample 1/X via a tilted reciprocal scheme.
        while True:
            while True:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
                if e1 * e1 <= 2.0 * e2 / t:
                    break
            x = t / (1.0 + t * e1) ** 2
            if rng.random() <= math.exp(-0.5 * z * z * x):
                return x
    else:
        mu = 1.0 / z
        while True:
            y = rng.standard_normal()
            y = y * y
            x = mu + 0.5 * mu * mu * y - 0.5 * mu * math.sqrt(
                4.0 * mu * y + (mu * y) ** 2
            )
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
            if x <= t:
                return x


def _devroye_single(z: float, rng: np.random.Generator) -> float:
    """One draw of J*(1, z) / 4 = PG(1, 2z)."""
    z = abs(z)
    fz = math.pi * math.pi / 8.0 + z * z / 2.0
    tail_mass = _exp_tail_mass(z)
    for _ in range(_MAX_ROUNDS):
        if rng.random() < tail_mass:
            x = _TRUNC + rng.standard_exponential() / fz
        else:
            x = _trunc_inv_gauss(z, rng)
        s = _series_coef(0, x)
        y = rng.random() * s
        n = 0
        while n < _MAX_SERIES:
            n += 1
            if n % 2 == 1:
                s -= _series_coef(n, x)
                if y <= s:
                    return x / 4.0
            else:
                s += _series_coef(n, x)
                if y > s:
                    break
    raise RuntimeError("Polya-Gamma rejection sampler failed to accept")


def polya_gamma_sample(b: int, c: float, rng: np.random.Generator) -> float:
    """Draw from PG(b, c) for integer shape b >= 1 and finite tilt c."""
    if b < 1 or b != int(b):
        raise ValueError("shape b must be a positive integer")
    if not math.isfinite(c):
        raise ValueError("tilt c must be finite")
    half = abs(c) / 2.0
    return sum(_devroye_single(half, rng) for _ in range(int(b)))


# Vectorised sampler ------------------------------------------------------


def _series_coef_vec(n: int, x: np.ndarray) -> np.ndarray:
    h = n + 0.5
    out = np.empty_like(x)
    left = x <= _TRUNC
    xl = x[left]
    out[left] = (
        math.pi * h * (2.0 / (math.pi * xl)) ** 1.5 * np.exp(-2.0 * h * h / xl)
    )
    xr = x[~left]
    out[~left] = math.pi * h * np.exp(-0.5 * h * h * math.pi * math.pi * xr)
    return out


def _trunc_inv_gauss_vec(z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    t = _TRUNC
    out = np.empty_like(z)
    low = z < 1.0 / t

    # Reciprocal scheme for means above the cutoff.
    idx = np.flatnonzero(low)
    while idx.size:
        e1 = rng.standard_exponential(idx.size)
        e2 = rng.standard_exponential(idx.size)
        ok = e1 * e1 <= 2.0 * e2 / t
        x = t / (1.0 + t * e1) ** 2
        ok &= rng.random(idx.size) <= np.exp(-0.5 * z[idx] ** 2 * x)
        out[idx[ok]] = x[ok]
        idx = idx[~ok]

    # Standard inverse-Gaussian draw with rejection below the cutoff.
    idx = np.flatnonzero(~low)
    while idx.size:
        mu = 1.0 / z[idx]
        y = rng.standard_normal(idx.size) ** 2
        x = mu + 0.5 * mu * mu * y - 0.5 * mu * np.sqrt(
            4.0 * mu * y + (mu * y) ** 2
        )
        flip = rng.random(idx.size) > mu / (mu + x)
        x[flip] = mu[flip] ** 2 / x[flip]
        ok = x <= t
        out[idx[ok]] = x[ok]
        idx = idx[~ok]
    return out


def pg_vector(c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw PG(1, c_i) for every element of c (masked batch rejection)."""
    c = np.asarray(c, dtype=float)
    z = np.abs(c).ravel() / 2.0
    fz = math.pi * math.pi / 8.0 + z * z / 2.0
    b_arg = math.sqrt(1.0 / _TRUNC) * (_TRUNC * z - 1.0)
    a_arg = -math.sqrt(1.0 / _TRUNC) * (_TRUNC * z + 1.0)
    x0 = np.log(fz) + fz * _TRUNC
    xb = np.minimum(x0 - z + log_ndtr(b_arg), 690.0)
    xa = np.minimum(x0 + z + log_ndtr(a_arg), 690.0)
    tail_mass = 1.0 / (1.0 + 4.0 / math.pi * (np.exp(xb) + np.exp(xa)))

    out = np.empty_like(z)
    idx = np.arange(z.size)
    for _ in range(_MAX_ROUNDS):
        if not idx.size:
            break
        use_tail = rng.random(idx.size) < tail_mass[idx]
        x = np.empty(idx.size)
        if np.any(use_tail):
            n_tail = int(use_tail.sum())
            x[use_tail] = (
                _TRUNC + rng.standard_exponential(n_tail) / fz[idx[use_tail]]
            )
        if not np.all(use_tail):
            x[~use_tail] = _trunc_inv_gauss_vec(z[idx[~use_tail]], rng)

        s = _series_coef_vec(0, x)
        y = rng.random(idx.size) * s
        decided = np.zeros(idx.size, dtype=bool)
        accepted = np.zeros(idx.size, dtype=bool)
        for n in range(1, _MAX_SERIES + 1):
            open_ = ~decided
            if not np.any(open_):
                break
            coef = _series_coef_vec(n, x[open_])
            if n % 2 == 1:
                s[open_] -= coef
                hit = np.zeros_like(decided)
                hit[open_] = y[open_] <= s[open_]
                accepted |= hit
                decided |= hit
            else:
                s[open_] += coef
                miss = np.zeros_like(decided)
                miss[open_] = y[open_] > s[open_]
                decided |= miss
        out[idx[accepted]] = x[accepted] / 4.0
        idx = idx[~accepted]
    if idx.size:
        raise RuntimeError("Polya-Gamma rejection sampler failed to accept")
    return out.reshape(np.shape(c))
