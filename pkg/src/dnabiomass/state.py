"""Sampler state, chain configuration, draw storage, and precomputations.

The chain operates on a mutable ModelState in the centred parameterisation:
the species amplification level is absorbed into the biomass intercepts, the
latent sample quantities, and the contamination levels, so every Gaussian
layer is anchored by its parent mean. The immutable ModelContext carries the
dataset plus everything derivable from it once per chain (spatial kernel
factorisations, segment boundaries, covariate Grams, clamp masks).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .datamodel import HyperParams, OtuDataset, require_valid
from .matnorm import GhState, kernel_covariance, leave_one_out_solves

__all__ = [
    "ChainConfig",
    "ModelState",
    "ModelContext",
    "Draws",
    "DEFAULT_TRACK",
    "build_context",
    "initial_state",
]

DEFAULT_TRACK = (
    "beta0_bar",
    "B",
    "L_bar",
    "T",
    "lambda",
    "r",
    "sigma_s",
    "sigma_u",
    "phi1",
    "phi",
    "zeta",
    "p",
    "q",
    "pi",
    "mu_tilde",
)

#: Linear predictors are clipped to this range inside likelihood terms.
PREDICTOR_CLAMP = 30.0


@dataclass(frozen=True)
class ChainConfig:
    """Run-length, adaptation, and variant switches for one chain.

    ``indicator_mode`` selects the indicator-block proposal: "gibbs" always
    draws from the factorised full conditional, "adaptive" switches to the
    empirical-frequency proposal after burn-in (and rejects designs with
    more than 12 PCR replicates per sample), and "auto" behaves like
    "adaptive" where that depth limit permits and falls back to "gibbs"
    otherwise. ``sample_lambda`` turns the species-level random-walk update
    off (the level is then held at its initial value, which the joint
    simulators use since the level prior is flat). ``error_free`` fits the
    variant with detection and noise switched off (all indicators clamped to
    amplified). ``factor_step`` toggles the paired factor-average move.
    """

    n_iter: int = 2000
    n_burnin: int = 1000
    thin: int = 1
    seed: int = 0
    adapt_interval: int = 200
    target_accept: float = 0.44
    laplace_max_iter: int = 20
    indicator_epsilon: float = 0.05
    indicator_mode: str = "auto"
    sample_lambda: bool = True
    error_free: bool = False
    factor_step: bool = True
    track: tuple[str, ...] = DEFAULT_TRACK

    def validate(self) -> None:
        if not 0 <= self.n_burnin < self.n_iter:
            raise ValueError("need 0 <= n_burnin < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0.0 < self.indicator_epsilon < 0.5:
            raise ValueError("indicator_epsilon must lie in (0, 0.5)")
        if self.indicator_mode not in ("auto", "gibbs", "adaptive"):
            raise ValueError("indicator_mode must be auto, gibbs or adaptive")
        if self.adapt_interval < 1:
            raise ValueError("adapt_interval must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        unknown = set(self.track) - set(DEFAULT_TRACK)
        if unknown:
            raise ValueError(f"unknown tracked names: {sorted(unknown)}")


@dataclass
class ModelState:
    """All parameters and latents of one chain (centred parameterisation).

    Shapes: n sites, J samples, P PCR rows, S target species, S_tot
    including spike-ins. ``v_bar`` holds NaN where no latent sample
    quantity exists (indicator off); ``eta`` holds NaN outside c=1 cells.
    ``c`` codes the PCR outcome: 0 none, 1 amplified, 2 noise.
    """

    lam: np.ndarray  # (S,) species amplification levels
    beta0_bar: np.ndarray  # (S,) centred biomass intercepts
    B: np.ndarray  # (n_z, S) biomass covariate coefficients
    L_bar: np.ndarray  # (n, S) centred latent log biomass
    gh: GhState  # species precision (inverse column covariance)
    sigma_u_sq: float
    u: np.ndarray  # (P,) pipeline effects
    v_bar: np.ndarray  # (J, S) centred latent sample quantities
    delta: np.ndarray  # (J, S) species-present indicators
    gamma: np.ndarray  # (J, S) contamination indicators
    c: np.ndarray  # (P, S_tot) PCR outcome codes
    eta: np.ndarray  # (P, S_tot) Poisson-Gamma latents
    r: np.ndarray  # (S_tot,) NB sizes
    beta_w: np.ndarray  # (n_w, S) collection covariate coefficients
    sigma_s_sq: np.ndarray  # (S,) sample noise variances
    mu_bar: np.ndarray  # (S,) centred contamination levels
    nu_sq: float  # fixed contamination variance
    phi1: np.ndarray  # (S,) detection slopes on biomass
    phi: np.ndarray  # (n_w, S) detection covariate coefficients
    zeta: np.ndarray  # (S,) contamination probabilities
    p: np.ndarray  # (S_tot,) amplification probabilities
    q: np.ndarray  # (S,) noise amplification probabilities
    pi: float  # zero-inflation weight of the zero model
    mu0: float  # zero-model NB mean
    n0: float  # zero-model NB size
    mu_tilde: float  # noise-read Poisson mean
    omega: np.ndarray  # (J, S) Polya-Gamma auxiliaries

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class ModelContext:
    """Dataset, hyperparameters, and per-chain precomputed structures."""

    dataset: OtuDataset
    hyper: HyperParams
    reads: np.ndarray  # (P, S_tot) int64
    reads_f: np.ndarray  # float copy
    log_y_fact: np.ndarray  # gammaln(reads + 1)
    offsets: np.ndarray  # (P,)
    x_w: np.ndarray  # (J, n_w)
    sample_of_pcr: np.ndarray
    site_of_sample: np.ndarray
    site_of_pcr: np.ndarray
    pcr_start: np.ndarray  # (J+1,) PCR row segment bounds per sample
    site_sample_start: np.ndarray  # (n+1,) sample segment bounds per site
    slot_of_pcr: np.ndarray  # (P,) position of the row within its sample
    k_per_sample: np.ndarray  # (J,)
    nc_mask: np.ndarray  # (J,) negative-control flags
    active_mask: np.ndarray  # (J,) samples contributing detection terms
    spike_v: np.ndarray  # (J, S_star) known spike log amounts
    sigma: np.ndarray  # (n, n) spatial kernel
    sigma_fac: tuple  # Cholesky factorisation of sigma
    xbar: np.ndarray  # (n, 1+n_z) intercept-augmented site design
    sigma_inv_xbar: np.ndarray  # sigma^-1 xbar
    gram_xbar: np.ndarray  # xbar' sigma^-1 xbar
    row_loo_mat: np.ndarray  # (n, n) embedded leave-one-out solves
    row_loo_scal: np.ndarray  # (n,) conditional variance factors

    @property
    def n_sites(self) -> int:
        return self.sigma.shape[0]

    @property
    def n_samples(self) -> int:
        return self.site_of_sample.shape[0]

    @property
    def n_pcr(self) -> int:
        return self.reads.shape[0]

    @property
    def n_species(self) -> int:
        return self.dataset.n_species

    @property
    def n_species_total(self) -> int:
        return self.reads.shape[1]

    @property
    def n_spikes(self) -> int:
        return self.dataset.n_spikes


def _embedded_loo(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out solves embedded in a square matrix (zero diagonal)."""
    solves, scalars = leave_one_out_solves(cov)
    m = cov.shape[0]
    mat = np.zeros((m, m))
    idx = np.arange(m)
    for i, x1 in enumerate(solves):
        mat[i, idx != i] = x1
    return mat, scalars


def build_context(dataset: OtuDataset, hyper: HyperParams) -> ModelContext:
    """Validate the dataset and precompute everything a chain reuses."""
    require_valid(dataset)
    hyper.validate()

    reads = np.asarray(dataset.reads).astype(np.int64)
    sample_of_pcr = dataset.sample_of_pcr.astype(np.int64)
    site_of_sample = dataset.site_of_sample.astype(np.int64)
    n_samples = dataset.n_samples
    n_sites = dataset.n_sites

    sigma = kernel_covariance(dataset.unit_coordinates, hyper.l_Sigma)
    sigma_fac = cho_factor(sigma, lower=True)
    xbar = np.hstack([np.ones((n_sites, 1)), dataset.site_covariates])
    sigma_inv_xbar = cho_solve(sigma_fac, xbar)
    gram_xbar = xbar.T @ sigma_inv_xbar
    row_loo_mat, row_loo_scal = _embedded_loo(sigma)

    pcr_start = np.searchsorted(
        sample_of_pcr, np.arange(n_samples + 1)
    ).astype(np.int64)
    site_sample_start = np.searchsorted(
        site_of_sample, np.arange(n_sites + 1)
    ).astype(np.int64)
    slot_of_pcr = np.arange(reads.shape[0]) - pcr_start[sample_of_pcr]
    k_per_sample = np.diff(pcr_start)

    nc_mask = dataset.negative_control.copy()

    return ModelContext(
        dataset=dataset,
        hyper=hyper,
        reads=reads,
        reads_f=reads.astype(float),
        log_y_fact=gammaln(reads + 1.0),
        offsets=dataset.offsets.astype(float),
        x_w=dataset.sample_covariates.astype(float),
        sample_of_pcr=sample_of_pcr,
        site_of_sample=site_of_sample,
        site_of_pcr=site_of_sample[sample_of_pcr],
        pcr_start=pcr_start,
        site_sample_start=site_sample_start,
        slot_of_pcr=slot_of_pcr.astype(np.int64),
        k_per_sample=k_per_sample.astype(np.int64),
        nc_mask=nc_mask,
        active_mask=~nc_mask,
        spike_v=dataset.spike_log_amounts.astype(float),
        sigma=sigma,
        sigma_fac=sigma_fac,
        xbar=xbar,
        sigma_inv_xbar=sigma_inv_xbar,
        gram_xbar=gram_xbar,
        row_loo_mat=row_loo_mat,
        row_loo_scal=row_loo_scal,
    )


def _segment_mean(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Mean over contiguous row segments of a (rows, cols) array.

    Empty segments (repeated boundaries) yield zero rows.
    """
    counts = np.diff(starts)
    idx = np.minimum(starts[:-1], max(values.shape[0] - 1, 0))
    sums = np.add.reduceat(values, idx, axis=0)
    sums[counts == 0] = 0.0
    return sums / np.maximum(counts, 1)[:, None]


def initial_state(
    ctx: ModelContext, config: ChainConfig, rng: np.random.Generator
) -> ModelState:
    """Deterministic-in-data starting point for one chain.

    Latent biomass and sample quantities start at log offset-corrected read
    means, indicators at their data-evident values, probabilities at prior
    means, and variance components at prior means. The Poisson-Gamma
    latents are drawn from their conjugate conditional at the end (the only
    stochastic element).
    """
    hyper = ctx.hyper
    n_s = ctx.n_species
    n_tot = ctx.n_species_total
    n_samples = ctx.n_samples
    n_pcr = ctx.n_pcr
    n_w = ctx.x_w.shape[1]
    n_z = ctx.xbar.shape[1] - 1

    corrected = ctx.reads_f * np.exp(-ctx.offsets)[:, None]
    site_pcr_start = np.searchsorted(
        ctx.site_of_pcr, np.arange(ctx.n_sites + 1)
    )
    site_mean = _segment_mean(corrected, site_pcr_start)
    sample_mean = _segment_mean(corrected, ctx.pcr_start)

    lam = np.log(corrected[:, :n_s].mean(axis=0) + 0.1)
    l_bar = np.log(site_mean[:, :n_s] + 0.1)

    any_read = np.add.reduceat(
        (ctx.reads > 0).astype(np.int64), ctx.pcr_start[:-1], axis=0
    )
    delta = (any_read[:, :n_s] > 0).astype(np.int8)
    delta[ctx.nc_mask] = 0
    gamma = np.zeros((n_samples, n_s), dtype=np.int8)

    if config.error_free:
        delta = np.ones((n_samples, n_s), dtype=np.int8)
        delta[ctx.nc_mask] = 0
        gamma[:] = 0

    active = (delta + gamma) > 0
    v_bar = np.full((n_samples, n_s), np.nan)
    v_init = np.log(sample_mean[:, :n_s] + 0.1)
    v_bar[active] = v_init[active]

    c = np.zeros((n_pcr, n_tot), dtype=np.int8)
    has_read = ctx.reads >= 1
    active_cells = active[ctx.sample_of_pcr]
    c[:, :n_s] = np.where(active_cells & has_read[:, :n_s], 1, 0)
    c[:, :n_s] = np.where(
        ~active_cells & has_read[:, :n_s], 2, c[:, :n_s]
    )
    if ctx.n_spikes:
        c[:, n_s:] = has_read[:, n_s:].astype(np.int8)
    if config.error_free:
        c[:, :] = 1
        c[ctx.nc_mask[ctx.sample_of_pcr], :n_s] = 0

    p = np.full(n_tot, hyper.a_p / (hyper.a_p + hyper.b_p))
    if config.error_free:
        p[:] = 1.0 - 1e-12

    state = ModelState(
        lam=lam,
        beta0_bar=lam.copy(),
        B=np.zeros((n_z, n_s)),
        L_bar=l_bar,
        gh=GhState.identity(n_s),
        sigma_u_sq=hyper.b_u / max(hyper.a_u - 1.0, 0.5),
        u=np.zeros(n_pcr),
        v_bar=v_bar,
        delta=delta,
        gamma=gamma,
        c=c,
        eta=np.full((n_pcr, n_tot), np.nan),
        r=np.full(n_tot, hyper.mu_r),
        beta_w=np.zeros((n_w, n_s)),
        sigma_s_sq=np.full(n_s, hyper.b_sigma / max(hyper.a_sigma - 1.0, 0.5)),
        mu_bar=lam.copy(),
        nu_sq=hyper.nu_fixed**2,
        phi1=np.ones(n_s),
        phi=np.zeros((n_w, n_s)),
        zeta=np.full(n_s, hyper.a_zeta / (hyper.a_zeta + hyper.b_zeta)),
        p=p,
        q=np.full(n_s, hyper.a_q / (hyper.a_q + hyper.b_q)),
        pi=hyper.a_pi / (hyper.a_pi + hyper.b_pi),
        mu0=1.0 / hyper.mu0_rate,
        n0=1.0 / hyper.n0_rate,
        mu_tilde=1.0 / hyper.mu_tilde_rate,
        omega=np.full((n_samples, n_s), 0.25),
    )
    return state


@dataclass
class Draws:
    """Thinned post-burn-in samples of the tracked parameter groups.

    ``samples`` maps each tracked group name to a (kept, dim) array whose
    columns are labelled by ``columns``. ``meta`` records the dimensions
    and labels needed to interpret the groups downstream.
    """

    samples: dict[str, np.ndarray]
    columns: dict[str, list[str]]
    iterations: np.ndarray
    config: ChainConfig
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(self.iterations.shape[0])

    def stacked(self, names=None) -> tuple[np.ndarray, list[str]]:
        """All tracked scalars side by side (kept, total_dim)."""
        if names is None:
            names = list(self.samples)
        mats = [self.samples[k] for k in names]
        labels = [lab for k in names for lab in self.columns[k]]
        return np.hstack(mats), labels
