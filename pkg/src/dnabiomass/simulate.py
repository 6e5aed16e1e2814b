"""Forward simulation of surveys and the two study-design harnesses.

The simulator draws every level of the generative hierarchy: species
amplification levels, latent biomass per site (optionally split into
high and low biomass halves, optionally spatially correlated), presence
and contamination indicators, latent sample quantities, pipeline
effects, per-PCR outcomes, and finally reads.

The detection intercept drawn here is absorbed by the fitted model into
the amplification level (the fit constrains the intercept to zero), so
the returned truth matches the fitted parametrisation for covariate
coefficients, variances, probabilities, and within-species biomass
contrasts, while the amplification level itself is recovered only up to
that shift.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datamodel import HyperParams, OtuDataset, require_valid
from .matnorm import GhState, kernel_covariance
from .state import ChainConfig, ModelState, build_context

__all__ = ["SimSettings", "simulate_dataset", "brier_study", "spikein_study"]


@dataclass(frozen=True)
class SimSettings:
    """Generative settings for one simulated survey.

    The defaults follow the reference simulation scale: site and sample
    noise 0.5, pipeline noise 1, amplification levels near 7 on the log
    scale, NB size 100, detection intercept near -1.5, contamination
    probability 0.02 with spread 1, amplification probability 0.95, noise
    amplification probability 0.05, zero model (0.9, 5, 5), and noise
    reads at mean 100.
    """

    n_sites: int = 10
    n_species: int = 5
    m_samples: int = 2
    k_pcr: int = 2
    n_spikes: int = 0
    n_negative_controls: int = 0
    n_site_covariates: int = 0
    n_sample_covariates: int = 0
    tau: float = 0.5
    sigma: float = 0.5
    sigma_u: float = 1.0
    beta0: float = 0.0
    beta_coef_sd: float = 1.0
    beta_w_sd: float = 1.0
    lambda_mean: float = 7.0
    lambda_sd: float = 1.0
    r: float = 100.0
    phi0_mean: float = -1.5
    phi0_sd: float = float(np.sqrt(0.001))
    phi1: float = 1.0
    phi_sd: float = 1.0
    zeta: float = 0.02
    contamination_sd: float = 1.0
    p: float = 0.95
    q: float = 0.05
    mu0: float = 5.0
    n0: float = 5.0
    pi: float = 0.9
    mu_tilde: float = 100.0
    spike_log_amount: float = 7.0
    site_split: bool = False
    site_split_high: float = 1.0
    site_split_low: float = 0.0
    spatial: bool = False
    l_Sigma: float = 0.05
    offset_sd: float = 0.0
    species_cov: np.ndarray | None = None

    def validate(self) -> None:
        counts = {
            "n_sites": self.n_sites,
            "n_species": self.n_species,
            "m_samples": self.m_samples,
            "k_pcr": self.k_pcr,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("n_spikes", "n_negative_controls",
                     "n_site_covariates", "n_sample_covariates"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("tau", "sigma", "sigma_u", "lambda_sd", "phi0_sd",
                     "contamination_sd", "beta_coef_sd", "beta_w_sd",
                     "phi_sd", "offset_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("p", "q", "zeta", "pi"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("r", "mu0", "n0", "mu_tilde", "l_Sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.species_cov is not None:
            cov = np.asarray(self.species_cov, dtype=float)
            if cov.shape != (self.n_species, self.n_species):
                raise ValueError("species_cov must be (n_species, n_species)")


def _zero_model_reads(rng, n_cells, pi, mu0, n0):
    out = np.zeros(n_cells, dtype=np.int64)
    nonzero = rng.random(n_cells) >= pi
    k = int(nonzero.sum())
    if k:
        prob = n0 / (n0 + mu0)
        out[nonzero] = 1 + rng.negative_binomial(n0, prob, k)
    return out


def simulate_dataset(
    settings: SimSettings, seed: int
) -> tuple[OtuDataset, ModelState]:
    """Draw one survey and return it with the generating state."""
    settings.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    n = settings.n_sites
    n_s = settings.n_species
    n_spk = settings.n_spikes
    n_tot = n_s + n_spk
    m = settings.m_samples
    k = settings.k_pcr
    n_nc = settings.n_negative_controls

    site_of_sample = np.repeat(np.arange(n), m)
    if n_nc:
        site_of_sample = np.concatenate(
            [site_of_sample, np.full(n_nc, n - 1, dtype=np.int64)]
        )
    n_samples = site_of_sample.size
    sample_of_pcr = np.repeat(np.arange(n_samples), k)
    n_pcr = sample_of_pcr.size
    nc_mask = np.zeros(n_samples, dtype=bool)
    if n_nc:
        nc_mask[n * m:] = True

    coordinates = rng.random((n, 2))
    x_z = rng.standard_normal((n, settings.n_site_covariates))
    x_w = rng.standard_normal((n_samples, settings.n_sample_covariates))
    offsets = settings.offset_sd * rng.standard_normal(n_pcr)

    lam = settings.lambda_mean + settings.lambda_sd * rng.standard_normal(n_s)
    b_coef = settings.beta_coef_sd * rng.standard_normal(
        (settings.n_site_covariates, n_s)
    )
    beta_w = settings.beta_w_sd * rng.standard_normal(
        (settings.n_sample_covariates, n_s)
    )

    if settings.site_split:
        parity_mean = np.where(
            np.arange(n) % 2 == 0,
            settings.site_split_high,
            settings.site_split_low,
        )
        mean_l = parity_mean[:, None] + np.zeros((1, n_s))
    else:
        mean_l = settings.beta0 + x_z @ b_coef

    noise = rng.standard_normal((n, n_s))
    if settings.spatial:
        sigma_mat = kernel_covariance(coordinates, settings.l_Sigma)
        noise = np.linalg.cholesky(sigma_mat) @ noise
    if settings.species_cov is not None:
        t_chol = np.linalg.cholesky(
            np.asarray(settings.species_cov, dtype=float)
        )
        noise = noise @ t_chol.T
        l_values = mean_l + noise
    else:
        l_values = mean_l + settings.tau * noise
    biomass = lam[None, :] + l_values

    phi0 = settings.phi0_mean + settings.phi0_sd * rng.standard_normal(n_s)
    phi1 = np.full(n_s, settings.phi1)
    phi = settings.phi_sd * rng.standard_normal(
        (settings.n_sample_covariates, n_s)
    )

    psi = (
        phi0[None, :]
        + phi1[None, :] * (biomass[site_of_sample] - lam[None, :])
        + x_w @ phi
    )
    theta = 1.0 / (1.0 + np.exp(-np.clip(psi, -500, 500)))
    delta = (rng.random((n_samples, n_s)) < theta).astype(np.int8)
    delta[nc_mask] = 0
    gamma = np.zeros_like(delta)
    off = delta == 0
    gamma[off] = (rng.random(int(off.sum())) < settings.zeta).astype(np.int8)
    gamma[nc_mask] = 0

    mu_bar = lam + settings.contamination_sd * rng.standard_normal(n_s)
    mean_del = biomass[site_of_sample] + x_w @ beta_w
    nu = 1.0
    sd_v = np.where(delta == 1, settings.sigma, nu)
    mean_v = np.where(delta == 1, mean_del, mu_bar[None, :])
    v_bar = mean_v + sd_v * rng.standard_normal((n_samples, n_s))
    v_bar[(delta + gamma) == 0] = np.nan

    u = settings.sigma_u * rng.standard_normal(n_pcr)
    spike_v = np.full((n_samples, n_spk), settings.spike_log_amount)

    # Outcomes per cell.
    active_cell = ((delta + gamma) > 0)[sample_of_pcr]
    c = np.zeros((n_pcr, n_tot), dtype=np.int8)
    u_cell = rng.random((n_pcr, n_tot))
    amp_pool = np.concatenate(
        [active_cell, np.ones((n_pcr, n_spk), dtype=bool)], axis=1
    )
    c[amp_pool & (u_cell < settings.p)] = 1
    noise_cells = ~active_cell & (u_cell[:, :n_s] < settings.q)
    c[:, :n_s][noise_cells] = 2

    # Reads.
    v_all = np.hstack([v_bar[sample_of_pcr], spike_v[sample_of_pcr]])
    m_cell = v_all + (u + offsets)[:, None]
    r_vec = np.full(n_tot, settings.r)
    eta = np.full((n_pcr, n_tot), np.nan)
    reads = np.zeros((n_pcr, n_tot), dtype=np.int64)

    c1 = c == 1
    mm = np.clip(m_cell[c1], -690, 690)
    r_cell = np.broadcast_to(r_vec, c.shape)[c1]
    eta_draws = rng.gamma(r_cell) * np.exp(mm) / r_cell
    eta[c1] = eta_draws
    reads[c1] = rng.poisson(np.minimum(eta_draws, 1e15))

    c0 = c == 0
    reads[c0] = _zero_model_reads(
        rng, int(c0.sum()), settings.pi, settings.mu0, settings.n0
    )
    c2 = c == 2
    reads[c2] = rng.poisson(settings.mu_tilde, int(c2.sum()))

    dataset = OtuDataset(
        reads=reads,
        offsets=offsets,
        sample_of_pcr=sample_of_pcr,
        site_of_sample=site_of_sample,
        coordinates=coordinates,
        site_covariates=x_z,
        sample_covariates=x_w,
        n_spikes=n_spk,
        spike_log_amounts=spike_v,
        negative_control=nc_mask,
    )
    require_valid(dataset)

    truth = ModelState(
        lam=lam,
        beta0_bar=lam + (
            np.full(n_s, 0.0)
            if settings.site_split
            else np.full(n_s, settings.beta0)
        ),
        B=b_coef,
        L_bar=biomass,
        gh=GhState.identity(n_s),
        sigma_u_sq=settings.sigma_u**2,
        u=u,
        v_bar=v_bar,
        delta=delta,
        gamma=gamma,
        c=c,
        eta=eta,
        r=r_vec,
        beta_w=beta_w,
        sigma_s_sq=np.full(n_s, settings.sigma**2),
        mu_bar=mu_bar,
        nu_sq=nu**2,
        phi1=phi1,
        phi=phi,
        zeta=np.full(n_s, settings.zeta),
        p=np.full(n_tot, settings.p),
        q=np.full(n_s, settings.q),
        pi=settings.pi,
        mu0=settings.mu0,
        n0=settings.n0,
        mu_tilde=settings.mu_tilde,
        omega=np.zeros((n_samples, n_s)),
    )
    return dataset, truth


def _pairwise_brier(l_draws, l_true, low_sites, high_sites):
    """Mean Brier score over (low, high) site pairs and species.

    l_draws has shape (n_draws, n_sites, n_species); scores use the
    posterior probability that the low site's biomass exceeds the high
    site's, judged against the simulated truth.
    """
    total = 0.0
    count = 0
    for i1 in low_sites:
        for i2 in high_sites:
            p_bar = np.mean(l_draws[:, i1, :] > l_draws[:, i2, :], axis=0)
            truth = (l_true[i1] > l_true[i2]).astype(float)
            total += float(np.sum((p_bar - truth) ** 2))
            count += l_true.shape[1]
    return total / count


def brier_study(
    settings: SimSettings,
    m_grid=(1, 2, 3, 4, 5),
    k_grid=(1, 2, 3, 4),
    n_rep: int = 10,
    chain_config: ChainConfig | None = None,
    hyper: HyperParams | None = None,
    seed: int = 0,
) -> dict[tuple[int, int], float]:
    """Mean Brier score for separating high and low biomass sites.

    Sites alternate between high and low mean biomass; each (M, K) cell
    fits the full model on fresh replicates and scores every
    (low site, high site) pair for every species.
    """
    base = replace(settings, site_split=True)
    results: dict[tuple[int, int], float] = {}
    for m in m_grid:
        for k in k_grid:
            scores = []
            for rep in range(n_rep):
                rep_seed = seed + 1000 * rep
                cfg = chain_config if chain_config is not None else ChainConfig(
                    n_iter=1500, n_burnin=600, seed=rep_seed
                )
                cfg = replace(
                    cfg, seed=rep_seed, track=("L_bar",)
                )
                sim = replace(base, m_samples=m, k_pcr=k)
                dataset, truth = simulate_dataset(sim, rep_seed)
                from .engine import run_chain

                draws = run_chain(dataset, hyper, cfg)
                l_draws = draws.samples["L_bar"].reshape(
                    draws.n_draws, sim.n_sites, sim.n_species
                )
                high = np.arange(0, sim.n_sites, 2)
                low = np.arange(1, sim.n_sites, 2)
                scores.append(
                    _pairwise_brier(l_draws, truth.L_bar, low, high)
                )
            results[(m, k)] = float(np.mean(scores))
    return results


def _error_free_settings(settings: SimSettings) -> SimSettings:
    """Switch off every error process for the spike-in study."""
    return replace(
        settings,
        phi0_mean=50.0,
        phi0_sd=0.0,
        p=1.0,
        q=0.0,
        zeta=0.0,
        pi=1.0,
    )


def _drop_spikes(dataset: OtuDataset, keep: int) -> OtuDataset:
    """Same survey with only the first `keep` spike-in species."""
    n_s = dataset.n_species
    return OtuDataset(
        reads=dataset.reads[:, : n_s + keep],
        offsets=dataset.offsets,
        sample_of_pcr=dataset.sample_of_pcr,
        site_of_sample=dataset.site_of_sample,
        coordinates=dataset.coordinates,
        site_covariates=dataset.site_covariates,
        sample_covariates=dataset.sample_covariates,
        n_spikes=keep,
        spike_log_amounts=dataset.spike_log_amounts[:, :keep],
        negative_control=dataset.negative_control,
    )


def spikein_study(
    settings: SimSettings,
    m_grid=(1, 2, 3),
    k_grid=(1, 3),
    s_star_grid=(0, 1, 2, 3),
    n_rep: int = 3,
    chain_config: ChainConfig | None = None,
    hyper: HyperParams | None = None,
    seed: int = 0,
) -> dict[tuple[int, int, int], dict[str, float]]:
    """Relative error and variance of biomass contrasts versus spike-ins.

    Every (M, K) cell simulates one survey per replicate with the largest
    spike-in count, then refits nested subsets that drop trailing spike-in
    columns, so the target reads are identical across the spike-in axis.
    Fits use the error-free model variant. Ratios are normalised to the
    no-spike-in cell: the returned rel_var and rel_error equal 1 there by
    construction.
    """
    max_spk = max(s_star_grid)
    base = _error_free_settings(replace(settings, n_spikes=max_spk))
    results: dict[tuple[int, int, int], dict[str, float]] = {}
    from .engine import run_chain

    for m in m_grid:
        for k in k_grid:
            raw = {s: {"var": [], "err": []} for s in s_star_grid}
            for rep in range(n_rep):
                rep_seed = seed + 1000 * rep + 17
                sim = replace(base, m_samples=m, k_pcr=k)
                dataset, truth = simulate_dataset(sim, rep_seed)
                for s_star in s_star_grid:
                    sub = (
                        dataset
                        if s_star == max_spk
                        else _drop_spikes(dataset, s_star)
                    )
                    cfg = (
                        chain_config
                        if chain_config is not None
                        else ChainConfig(n_iter=1200, n_burnin=500)
                    )
                    cfg = replace(
                        cfg,
                        seed=rep_seed + s_star,
                        error_free=True,
                        track=("L_bar",),
                    )
                    draws = run_chain(sub, hyper, cfg)
                    l_draws = draws.samples["L_bar"].reshape(
                        draws.n_draws, sim.n_sites, sim.n_species
                    )
                    n_pairs = sim.n_sites // 2
                    first = np.arange(0, 2 * n_pairs, 2)
                    second = first + 1
                    diffs = l_draws[:, first, :] - l_draws[:, second, :]
                    true_diff = truth.L_bar[first] - truth.L_bar[second]
                    post_var = diffs.var(axis=0, ddof=1)
                    post_err = (diffs.mean(axis=0) - true_diff) ** 2
                    raw[s_star]["var"].append(float(post_var.mean()))
                    raw[s_star]["err"].append(float(post_err.mean()))
            base_var = float(np.mean(raw[s_star_grid[0]]["var"]))
            base_err = float(np.mean(raw[s_star_grid[0]]["err"]))
            for s_star in s_star_grid:
                results[(m, k, s_star)] = {
                    "rel_var": float(np.mean(raw[s_star]["var"])) / base_var,
                    "rel_error": float(np.mean(raw[s_star]["err"]))
                    / base_err,
                }
    return results
