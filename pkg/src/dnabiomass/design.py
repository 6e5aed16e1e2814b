"""Closed-form study-design variances and their exact Gaussian oracle.

The reduced design model is Gaussian: latent biomass per site and
species, latent sample quantities around it, species levels with a very
wide prior, pipeline effects per PCR, and Gaussian reads. Spike-in
species have their sample quantity pinned to zero, which is what makes
them informative about the pipeline effects.

The closed forms give the posterior variance of a within-species
biomass difference between two sites and of a shared covariate
coefficient. The oracle builds the implied joint normal literally,
conditions on the reads by linear algebra, and returns the same
quantities; the difference variance is reported in the per-site
convention Var(l1 | y) - Cov(l1, l2 | y), half the variance of the
difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DesignSpec",
    "var_biomass_diff",
    "var_beta",
    "gaussian_design_oracle",
]

_DIM_CAP = 5000


@dataclass(frozen=True)
class DesignSpec:
    """Survey geometry and noise levels for the design calculators."""

    n_sites: int = 10
    m_samples: int = 1
    k_pcr: int = 1
    n_species: int = 1
    n_spikes: int = 0
    sigma_sq: float = 1.0
    sigma_y_sq: float = 1.0
    sigma_u_sq: float = 1.0
    tau_sq: float = 1.0
    sigma_lambda_sq: float | None = None

    def validate(self) -> None:
        for name in ("n_sites", "m_samples", "k_pcr", "n_species"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if int(self.n_spikes) < 0:
            raise ValueError("n_spikes must be >= 0")
        for name in ("sigma_sq", "sigma_y_sq", "tau_sq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.sigma_u_sq < 0:
            raise ValueError("sigma_u_sq must be >= 0")
        if self.sigma_lambda_sq is not None and self.sigma_lambda_sq <= 0:
            raise ValueError("sigma_lambda_sq must be > 0")

    def lambda_variance(self) -> float:
        """Wide species-level prior variance used by the oracle."""
        if self.sigma_lambda_sq is not None:
            return float(self.sigma_lambda_sq)
        return 1e6 * max(
            self.sigma_sq, self.sigma_y_sq, self.sigma_u_sq, self.tau_sq
        )


def var_biomass_diff(spec: DesignSpec) -> float:
    """Posterior variance of a within-species biomass site contrast.

    Halved convention: the value equals Var(l1 | y) - Cov(l1, l2 | y).
    """
    spec.validate()
    m, k = spec.m_samples, spec.k_pcr
    ratio = spec.sigma_u_sq / spec.sigma_y_sq
    inner = 1.0 + ratio / (ratio * spec.n_spikes + 1.0)
    return (spec.sigma_sq + spec.sigma_y_sq / k * inner) / m


def var_beta(spec: DesignSpec) -> float:
    """Posterior variance of the shared biomass covariate coefficient."""
    spec.validate()
    if spec.n_sites < 2:
        raise ValueError("n_sites must be >= 2 for the coefficient variance")
    n, m, k = spec.n_sites, spec.m_samples, spec.k_pcr
    s, s_star = spec.n_species, spec.n_spikes
    ratio = spec.sigma_u_sq / spec.sigma_y_sq
    first = (
        spec.tau_sq + (spec.sigma_sq + spec.sigma_y_sq / k) / m
    ) / (n - 1.0)
    denom = (
        spec.sigma_y_sq
        + (m * spec.tau_sq + spec.sigma_sq) * k * (1.0 + s_star * ratio)
        + spec.sigma_u_sq * (s + s_star - 1.0)
    )
    return first * (1.0 + spec.sigma_u_sq / denom)


def _design_indices(spec: DesignSpec, beta_mode: bool):
    """Variable index layout for the joint Gaussian precision matrix."""
    n, m, k = spec.n_sites, spec.m_samples, spec.k_pcr
    s, s_star = spec.n_species, spec.n_spikes
    use_u = spec.sigma_u_sq > 0
    dim = 0
    if beta_mode:
        # The coefficient belongs to one species of interest; the other
        # target species keep plain biomass priors and inform it only
        # through the shared pipeline effects.
        idx_beta = dim
        dim += 1
    else:
        idx_beta = None
    idx_l = dim
    dim += n * s
    idx_v = dim
    dim += n * m * s
    idx_lam = dim
    dim += s + s_star
    idx_u = dim if use_u else None
    if use_u:
        dim += n * m * k
    if dim > _DIM_CAP:
        raise ValueError(
            f"design oracle dimension {dim} exceeds the cap {_DIM_CAP}"
        )
    return idx_beta, idx_l, idx_v, idx_lam, idx_u, dim


def _design_posterior_cov(
    spec: DesignSpec, beta_mode: bool, x: np.ndarray | None
) -> tuple[np.ndarray, tuple]:
    """Exact posterior covariance of all latents given the reads."""
    n, m, k = spec.n_sites, spec.m_samples, spec.k_pcr
    s, s_star = spec.n_species, spec.n_spikes
    idx_beta, idx_l, idx_v, idx_lam, idx_u, dim = _design_indices(
        spec, beta_mode
    )
    prec = np.zeros((dim, dim))

    def l_of(sp, i):
        return idx_l + sp * n + i

    def v_of(sp, i, mm):
        return idx_v + (sp * n + i) * m + mm

    def u_of(i, mm, kk):
        return idx_u + (i * m + mm) * k + kk

    # Biomass prior: flat in diff mode, centred on the covariate effect
    # with between-site variance tau^2 in beta mode.
    if beta_mode:
        w = 1.0 / spec.tau_sq
        for sp in range(s):
            for i in range(n):
                li = l_of(sp, i)
                prec[li, li] += w
                if sp == 0:
                    prec[li, idx_beta] -= w * x[i]
                    prec[idx_beta, li] -= w * x[i]
                    prec[idx_beta, idx_beta] += w * x[i] ** 2

    # Sample quantities around biomass.
    w = 1.0 / spec.sigma_sq
    for sp in range(s):
        for i in range(n):
            li = l_of(sp, i)
            for mm in range(m):
                vi = v_of(sp, i, mm)
                prec[vi, vi] += w
                prec[li, li] += w
                prec[vi, li] -= w
                prec[li, vi] -= w

    # Species levels.
    w_lam = 1.0 / spec.lambda_variance()
    for sp in range(s + s_star):
        prec[idx_lam + sp, idx_lam + sp] += w_lam

    # Pipeline effects.
    if idx_u is not None:
        w_u = 1.0 / spec.sigma_u_sq
        for i in range(n):
            for mm in range(m):
                for kk in range(k):
                    ui = u_of(i, mm, kk)
                    prec[ui, ui] += w_u

    # Reads: y = v (targets) + lambda + u + noise.
    w_y = 1.0 / spec.sigma_y_sq
    for sp in range(s + s_star):
        for i in range(n):
            for mm in range(m):
                for kk in range(k):
                    cols = [idx_lam + sp]
                    if sp < s:
                        cols.append(v_of(sp, i, mm))
                    if idx_u is not None:
                        cols.append(u_of(i, mm, kk))
                    for a in cols:
                        for b in cols:
                            prec[a, b] += w_y

    cov = np.linalg.inv(prec)
    return cov, (idx_beta, idx_l, idx_v, idx_lam, idx_u)


def gaussian_design_oracle(
    spec: DesignSpec,
    mode: str = "diff",
    n_draws: int = 200,
    seed: int = 0,
) -> float:
    """Brute-force posterior variance from the dense joint Gaussian.

    diff mode returns Var(l1 | y) - Cov(l1, l2 | y) for the first target
    species (flat biomass prior).

    beta mode works on the precision scale, matching the closed form's
    construction: the posterior precision of the coefficient is exactly
    linear in the covariate statistics (X'X, (sum X)^2), so the two linear
    weights are recovered by least squares across the covariate draws and
    the expectations of both statistics (n each) are substituted. Plain
    averaging of the per-draw variances would additionally include the
    Jensen gap between E[1/precision] and 1/E[precision], which the
    closed form deliberately ignores.
    """
    spec.validate()
    if mode == "diff":
        cov, (_, il, _, _, _) = _design_posterior_cov(spec, False, None)
        return float(cov[il, il] - cov[il, il + 1])
    if mode == "beta":
        if spec.n_sites < 2:
            raise ValueError("beta mode needs n_sites >= 2")
        rng = np.random.Generator(np.random.PCG64(seed))
        stats = np.empty((n_draws, 2))
        precisions = np.empty(n_draws)
        for d in range(n_draws):
            x = rng.standard_normal(spec.n_sites)
            cov, (ib, _, _, _, _) = _design_posterior_cov(spec, True, x)
            precisions[d] = 1.0 / cov[ib, ib]
            stats[d] = (x @ x, x.sum() ** 2)
        weights, *_ = np.linalg.lstsq(stats, precisions, rcond=None)
        expected = float(spec.n_sites * weights.sum())
        return 1.0 / expected
    raise ValueError("mode must be 'diff' or 'beta'")
