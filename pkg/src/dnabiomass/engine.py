"""Chain driver: sweep schedule, adaptation, tracking, and diagnostics.

The sweep order is fixed: Poisson-Gamma latents, the latent quantity and
pipeline effect block, latent biomass, biomass coefficients, collection
coefficients, sample variances, contamination levels, amplification
levels, NB sizes, detection coefficients, the indicator block, outcome
probabilities, noise parameters, pipeline variance, and the species
precision. Random-walk scales adapt during burn-in only; the indicator
proposal table keeps refreshing on a fixed interval with diminishing
influence because counts accumulate over the whole run.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import gammaln

from ._backend import BACKEND_NAME, kernels
from .datamodel import HyperParams, OtuDataset
from .matnorm import (
    MatrixNormalParams,
    gh_prior_draw,
    gh_update_precision,
    matnorm_draw,
    matnorm_logpdf,
)
from .state import (
    PREDICTOR_CLAMP,
    ChainConfig,
    Draws,
    ModelContext,
    ModelState,
    build_context,
    initial_state,
)
from .updates import (
    AdaptState,
    nb_log_pmf,
    poisson_log_pmf,
    read_log_means,
    update_B0_B,
    update_bernoulli_probs,
    update_beta_w,
    update_eta,
    update_indicators_sweep,
    update_lambda,
    update_lbar,
    update_mu_bar,
    update_noise_params,
    update_phi,
    update_r,
    update_sigma_s,
    update_sigma_u,
    update_v_u_block,
    zero_model_log_pmf,
)

__all__ = [
    "Sampler",
    "run_chain",
    "joint_log_density",
    "uncentred_loglik",
    "prior_state",
    "draw_reads",
    "context_with_reads",
]

logger = logging.getLogger(__name__)

_POISSON_CAP = 1e15


class Sampler:
    """One MCMC chain over the read-count model."""

    def __init__(
        self,
        dataset: OtuDataset,
        hyper: HyperParams | None = None,
        config: ChainConfig | None = None,
    ):
        self.hyper = hyper if hyper is not None else HyperParams()
        self.config = config if config is not None else ChainConfig()
        self.config.validate()
        self.ctx = build_context(dataset, self.hyper)
        self.rng = np.random.Generator(np.random.PCG64(self.config.seed))
        self.state = initial_state(self.ctx, self.config, self.rng)
        self.adapt = AdaptState.create(self.ctx, self.config)
        self.iteration = 0
        self._clamp_warned = False
        update_eta(self.state, self.ctx, self.rng)

    # -- schedule ----------------------------------------------------------

    def _indicator_adaptive_now(self) -> bool:
        mode = self.config.indicator_mode
        if mode == "gibbs":
            return False
        if mode == "auto" and self.adapt.indicator_counts is None:
            return False
        return self.iteration > self.config.n_burnin

    def sweep(self) -> None:
        state, ctx, rng, config, adapt = (
            self.state,
            self.ctx,
            self.rng,
            self.config,
            self.adapt,
        )
        self.iteration += 1
        adapt.n_since += 1

        update_eta(state, ctx, rng)
        update_v_u_block(state, ctx, rng, config)
        update_lbar(state, ctx, rng, config)
        update_B0_B(state, ctx, rng)
        update_beta_w(state, ctx, rng)
        update_sigma_s(state, ctx, rng)
        update_mu_bar(state, ctx, rng)
        update_lambda(state, ctx, rng, config, adapt)
        update_r(state, ctx, rng, config, adapt)
        if not config.error_free:
            update_phi(state, ctx, rng, config)
            if self.iteration % config.adapt_interval == 0:
                adapt.refresh_indicator_snapshot(config.indicator_epsilon)
            update_indicators_sweep(
                state, ctx, rng, config, adapt, self._indicator_adaptive_now()
            )
            update_bernoulli_probs(state, ctx, rng)
            update_noise_params(state, ctx, rng, config, adapt)
        update_sigma_u(state, ctx, rng)
        coef = np.vstack([state.beta0_bar[None, :], state.B])
        state.gh = gh_update_precision(
            state.gh,
            state.L_bar - ctx.xbar @ coef,
            ctx.sigma,
            self.hyper.lambda_GH,
            rng,
        )

        if (
            self.iteration <= config.n_burnin
            and self.iteration % config.adapt_interval == 0
        ):
            adapt.tune(config.target_accept)
        self._check_clamp()

    def _check_clamp(self) -> None:
        state, ctx = self.state, self.ctx
        bound = float(
            np.nanmax(np.abs(state.v_bar), initial=0.0)
            + np.max(np.abs(state.u), initial=0.0)
            + np.max(np.abs(ctx.offsets), initial=0.0)
        )
        if bound > PREDICTOR_CLAMP:
            self.adapt.clamp_events += 1
            if not self._clamp_warned:
                logger.warning(
                    "linear predictor exceeded +/-%.0f and was clamped "
                    "inside likelihood evaluations",
                    PREDICTOR_CLAMP,
                )
                self._clamp_warned = True

    # -- tracking ----------------------------------------------------------

    def tracked_values(self) -> dict[str, np.ndarray]:
        state, ctx = self.state, self.ctx
        out: dict[str, np.ndarray] = {}
        track = self.config.track
        if "beta0_bar" in track:
            out["beta0_bar"] = state.beta0_bar.copy()
        if "B" in track:
            out["B"] = state.B.ravel().copy()
        if "L_bar" in track:
            # L_bar is mutated in place by the scan kernel, so a plain
            # ravel() view would alias the live buffer.
            out["L_bar"] = state.L_bar.ravel().copy()
        if "T" in track:
            cov = np.linalg.inv(state.gh.precision)
            out["T"] = (0.5 * (cov + cov.T)).ravel()
        if "lambda" in track:
            out["lambda"] = state.lam.copy()
        if "r" in track:
            out["r"] = state.r.copy()
        if "sigma_s" in track:
            out["sigma_s"] = np.sqrt(state.sigma_s_sq)
        if "sigma_u" in track:
            out["sigma_u"] = np.array([np.sqrt(state.sigma_u_sq)])
        if "phi1" in track:
            out["phi1"] = state.phi1.copy()
        if "phi" in track:
            out["phi"] = state.phi.ravel().copy()
        if "zeta" in track:
            out["zeta"] = state.zeta.copy()
        if "p" in track:
            out["p"] = state.p.copy()
        if "q" in track:
            out["q"] = state.q.copy()
        if "pi" in track:
            out["pi"] = np.array([state.pi])
        if "mu_tilde" in track:
            out["mu_tilde"] = np.array([state.mu_tilde])
        return out

    def column_labels(self) -> dict[str, list[str]]:
        ctx = self.ctx
        ds = ctx.dataset
        species = list(ds.species_labels())
        targets = species[: ctx.n_species]
        sites = list(ds.site_ids) if ds.site_ids else [
            f"site_{i + 1}" for i in range(ctx.n_sites)
        ]
        cov_z = [f"z{k + 1}" for k in range(ctx.xbar.shape[1] - 1)]
        cov_w = [f"w{k + 1}" for k in range(ctx.x_w.shape[1])]
        labels = {
            "beta0_bar": targets,
            "B": [f"{z}:{s}" for z in cov_z for s in targets],
            "L_bar": [f"{i}:{s}" for i in sites for s in targets],
            "T": [f"{a}:{b}" for a in targets for b in targets],
            "lambda": targets,
            "r": species,
            "sigma_s": targets,
            "sigma_u": ["sigma_u"],
            "phi1": targets,
            "phi": [f"{w}:{s}" for w in cov_w for s in targets],
            "zeta": targets,
            "p": species,
            "q": targets,
            "pi": ["pi"],
            "mu_tilde": ["mu_tilde"],
        }
        return {k: labels[k] for k in self.config.track}

    def run(self) -> Draws:
        config = self.config
        kept: dict[str, list[np.ndarray]] = {k: [] for k in config.track}
        iters: list[int] = []
        while self.iteration < config.n_iter:
            self.sweep()
            if (
                self.iteration > config.n_burnin
                and (self.iteration - config.n_burnin) % config.thin == 0
            ):
                for name, val in self.tracked_values().items():
                    kept[name].append(val)
                iters.append(self.iteration)
        samples = {
            name: (
                np.asarray(vals)
                if vals
                else np.empty((0, len(self.column_labels()[name])))
            )
            for name, vals in kept.items()
        }
        return Draws(
            samples=samples,
            columns=self.column_labels(),
            iterations=np.asarray(iters, dtype=np.int64),
            config=config,
            meta={
                "backend": BACKEND_NAME,
                "seed": config.seed,
                "clamp_events": int(self.adapt.clamp_events),
                "n_sites": int(self.ctx.n_sites),
                "n_species": int(self.ctx.n_species),
                "n_spikes": int(self.ctx.n_spikes),
            },
        )


def run_chain(
    dataset: OtuDataset,
    hyper: HyperParams | None = None,
    config: ChainConfig | None = None,
) -> Draws:
    """Run one chain and return the kept draws."""
    return Sampler(dataset, hyper, config).run()


# -- Joint density and invariance helpers -----------------------------------


def _ig_logpdf(x, shape, scale):
    return shape * np.log(scale) - gammaln(shape) - (shape + 1) * np.log(
        x
    ) - scale / x


def joint_log_density(state: ModelState, ctx: ModelContext) -> float:
    """Log of the joint density of data, latents, and parameters.

    Additive constants that involve only fixed hyperparameters are kept
    where convenient; the value is used for finiteness checks and relative
    comparisons, not as a normalised density.
    """
    hyper = ctx.hyper
    n_s = ctx.n_species
    total = 0.0

    # Latent biomass given coefficients and the species covariance.
    coef = np.vstack([state.beta0_bar[None, :], state.B])
    t_cov = np.linalg.inv(state.gh.precision)
    t_cov = 0.5 * (t_cov + t_cov.T)
    total += matnorm_logpdf(
        state.L_bar,
        MatrixNormalParams(
            mean=ctx.xbar @ coef, row_cov=ctx.sigma, col_cov=t_cov
        ),
    )

    # Coefficient priors (flat prior on the amplification anchor).
    total += float(
        np.sum(
            -0.5 * (state.beta0_bar - state.lam) ** 2 / hyper.sigma_beta_sq
        )
    )
    total += float(np.sum(-0.5 * state.B**2 / hyper.sigma_beta_sq))
    total += float(np.sum(-0.5 * state.beta_w**2 / hyper.sigma_beta_sq))
    total += float(
        np.sum(-0.5 * (state.mu_bar - state.lam) ** 2 / hyper.sigma_mu**2)
    )
    total += float(np.sum(-0.5 * state.phi1**2 / hyper.sigma_phi_sq))
    total += float(np.sum(-0.5 * state.phi**2 / hyper.sigma_phi_sq))

    # Species precision prior given its scale latents.
    gh = state.gh
    if n_s > 1:
        iu = np.triu_indices(n_s, k=1)
        off = gh.precision[iu]
        total += float(
            np.sum(
                -0.5 * off**2 / (gh.lambda_sq * gh.tau_sq)
                - 0.5 * np.log(gh.lambda_sq * gh.tau_sq)
            )
        )
        total += float(
            np.sum(_ig_logpdf(gh.lambda_sq, 0.5, 1.0 / gh.nu))
            + np.sum(_ig_logpdf(gh.nu, 0.5, 1.0))
        )
        total += float(
            _ig_logpdf(gh.tau_sq, 0.5, 1.0 / gh.xi)
            + _ig_logpdf(gh.xi, 0.5, 1.0)
        )
    total += float(
        np.sum(-0.5 * hyper.lambda_GH * np.diag(gh.precision))
    )

    # Variance and size priors.
    total += float(
        np.sum(_ig_logpdf(state.sigma_s_sq, hyper.a_sigma, hyper.b_sigma))
    )
    total += float(_ig_logpdf(state.sigma_u_sq, hyper.a_u, hyper.b_u))
    total += float(
        np.sum(-0.5 * (state.r - hyper.mu_r) ** 2 / hyper.sigma_r**2)
    )
    if np.any(state.r <= 0):
        return -np.inf

    # Probability priors.
    def beta_term(x, a, b):
        return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x)

    total += float(np.sum(beta_term(state.p, hyper.a_p, hyper.b_p)))
    total += float(np.sum(beta_term(state.q, hyper.a_q, hyper.b_q)))
    total += float(np.sum(beta_term(state.zeta, hyper.a_zeta, hyper.b_zeta)))
    total += float(beta_term(state.pi, hyper.a_pi, hyper.b_pi))
    total += -hyper.mu_tilde_rate * state.mu_tilde
    total += -hyper.mu0_rate * state.mu0 - hyper.n0_rate * state.n0

    # Pipeline effects.
    total += float(
        np.sum(-0.5 * state.u**2 / state.sigma_u_sq)
        - 0.5 * ctx.n_pcr * np.log(state.sigma_u_sq)
    )

    # Stage 2: indicators, latent quantities.
    site = ctx.site_of_sample
    psi = np.clip(
        state.phi1[None, :] * (state.L_bar[site] - state.lam[None, :])
        + ctx.x_w @ state.phi,
        -PREDICTOR_CLAMP,
        PREDICTOR_CLAMP,
    )
    act = ctx.active_mask
    bern = state.delta * psi - np.logaddexp(0.0, psi)
    total += float(np.sum(bern[act]))
    gam_elig = (state.delta == 0) & act[:, None]
    lz = np.log(state.zeta)[None, :]
    l1z = np.log1p(-state.zeta)[None, :]
    total += float(
        np.sum(
            np.where(
                gam_elig,
                np.where(state.gamma == 1, lz, l1z),
                0.0,
            )
        )
    )

    mean_del = state.L_bar[site] + ctx.x_w @ state.beta_w
    var_v = np.where(
        state.delta == 1, state.sigma_s_sq[None, :], state.nu_sq
    )
    mean_v = np.where(state.delta == 1, mean_del, state.mu_bar[None, :])
    active = (state.delta + state.gamma) > 0
    v_terms = -0.5 * (
        np.log(var_v)
        + (np.nan_to_num(state.v_bar) - mean_v) ** 2 / var_v
    )
    total += float(np.sum(v_terms[active]))
    if np.any(np.isnan(state.v_bar[active])):
        return -np.inf

    # Stage 3: outcomes, Poisson-Gamma latents, reads.
    j_of_t = ctx.sample_of_pcr
    c = state.c
    act_cell = active[j_of_t]
    lp = np.broadcast_to(np.log(state.p), c.shape)
    l1p = np.broadcast_to(np.log1p(-state.p), c.shape)
    lq = np.broadcast_to(np.log(state.q), (ctx.n_pcr, n_s))
    l1q = np.broadcast_to(np.log1p(-state.q), (ctx.n_pcr, n_s))
    tgt = c[:, :n_s]
    amp_pool = np.concatenate(
        [act_cell, np.ones((ctx.n_pcr, ctx.n_spikes), dtype=bool)], axis=1
    )
    total += float(
        np.sum(
            np.where(
                amp_pool, np.where(c == 1, lp, l1p), 0.0
            )
        )
    )
    total += float(
        np.sum(
            np.where(
                ~act_cell, np.where(tgt == 2, lq, l1q), 0.0
            )
        )
    )

    m = read_log_means(state, ctx)
    c1 = c == 1
    if np.any(np.isnan(m[c1])):
        return -np.inf
    r_row = np.broadcast_to(state.r, c.shape)
    eta = state.eta
    mm = np.clip(np.nan_to_num(m), -PREDICTOR_CLAMP, PREDICTOR_CLAMP)
    rate = r_row * np.exp(-mm)
    gamma_terms = (
        r_row * np.log(rate)
        - gammaln(r_row)
        + (r_row - 1.0) * np.log(np.nan_to_num(eta, nan=1.0))
        - rate * np.nan_to_num(eta)
    )
    pois_terms = ctx.reads_f * np.log(
        np.nan_to_num(eta, nan=1.0)
    ) - np.nan_to_num(eta) - ctx.log_y_fact
    total += float(np.sum(np.where(c1, gamma_terms + pois_terms, 0.0)))
    if np.any(np.isnan(eta[c1])):
        return -np.inf

    zero_terms = zero_model_log_pmf(
        ctx.reads_f,
        np.log(state.pi),
        np.log1p(-state.pi),
        state.mu0,
        state.n0,
    )
    total += float(np.sum(np.where(c == 0, zero_terms, 0.0)))
    noise_terms = poisson_log_pmf(
        ctx.reads_f, ctx.log_y_fact, state.mu_tilde
    )
    total += float(np.sum(np.where(c == 2, noise_terms, 0.0)))
    return float(total)


def uncentred_loglik(
    reads: np.ndarray,
    log_y_fact: np.ndarray,
    c_codes: np.ndarray,
    delta: np.ndarray,
    sample_of_pcr: np.ndarray,
    site_of_sample: np.ndarray,
    x_w: np.ndarray,
    beta0: np.ndarray,
    l_tilde: np.ndarray,
    v_tilde: np.ndarray,
    collection_rate: np.ndarray,
    lam: np.ndarray,
    u: np.ndarray,
    r: np.ndarray,
    phi0: np.ndarray,
    phi1: np.ndarray,
    phi: np.ndarray,
    beta_w: np.ndarray,
) -> float:
    """Read and detection log likelihood in the uncentred parametrisation.

    The read mean for an amplified cell is
    exp(beta0 + l_tilde + collection_rate + v_tilde + lam + u) and the
    detection probability is
    logistic(phi0 + phi1 * beta0 + phi1 * l_tilde + x_w @ phi). Shifting
    beta0 by c + d, lam by -c, collection_rate by -d, and phi0 by
    -phi1 (c + d) leaves the value unchanged.
    """
    j_of_t = sample_of_pcr
    site = site_of_sample
    m = (
        beta0[None, :]
        + l_tilde[site][j_of_t]
        + collection_rate[None, :]
        + v_tilde[j_of_t]
        + lam[None, :]
        + u[:, None]
    )
    mean_w = x_w @ beta_w
    m = m + mean_w[j_of_t]
    lik = nb_log_pmf(reads, log_y_fact, m, r[None, :])
    total = float(np.sum(np.where(c_codes == 1, lik, 0.0)))

    psi = (
        phi0[None, :]
        + phi1[None, :] * beta0[None, :]
        + phi1[None, :] * l_tilde[site]
        + x_w @ phi
    )
    total += float(np.sum(delta * psi - np.logaddexp(0.0, psi)))
    return total


# -- Forward simulation of the state and reads (prior and likelihood) -------


def prior_state(
    ctx: ModelContext,
    rng: np.random.Generator,
    lam: np.ndarray,
) -> ModelState:
    """Draw every parameter and latent from the prior at fixed lam."""
    from .matnorm import GhState
    from .state import ModelState as MS

    hyper = ctx.hyper
    n_s = ctx.n_species
    n_tot = ctx.n_species_total
    n_w = ctx.x_w.shape[1]
    n_z = ctx.xbar.shape[1] - 1

    def ig(shape, scale, size=None):
        return scale / rng.gamma(shape, size=size)

    gh = gh_prior_draw(n_s, hyper.lambda_GH, rng)
    sigma_Beta = np.sqrt(hyper.sigma_beta_sq)
    beta0 = lam + sigma_Beta * rng.standard_normal(n_s)
    B = sigma_Beta * rng.standard_normal((n_z, n_s))
    coef = np.vstack([beta0[None, :], B])
    t_cov = np.linalg.inv(gh.precision)
    t_cov = 0.5 * (t_cov + t_cov.T)
    L = matnorm_draw(
        MatrixNormalParams(
            mean=ctx.xbar @ coef, row_cov=ctx.sigma, col_cov=t_cov
        ),
        rng,
    )

    sigma_s_sq = ig(hyper.a_sigma, hyper.b_sigma, n_s)
    sigma_u_sq = float(ig(hyper.a_u, hyper.b_u))
    u = np.sqrt(sigma_u_sq) * rng.standard_normal(ctx.n_pcr)
    beta_w = sigma_Beta * rng.standard_normal((n_w, n_s))
    mu_bar = lam + hyper.sigma_mu * rng.standard_normal(n_s)
    sigma_phi = np.sqrt(hyper.sigma_phi_sq)
    phi1 = sigma_phi * rng.standard_normal(n_s)
    phi = sigma_phi * rng.standard_normal((n_w, n_s))
    r = np.empty(n_tot)
    for s in range(n_tot):
        val = -1.0
        while val <= 0:
            val = hyper.mu_r + hyper.sigma_r * rng.standard_normal()
        r[s] = val
    p = rng.beta(hyper.a_p, hyper.b_p, n_tot)
    q = rng.beta(hyper.a_q, hyper.b_q, n_s)
    zeta = rng.beta(hyper.a_zeta, hyper.b_zeta, n_s)
    pi = float(rng.beta(hyper.a_pi, hyper.b_pi))
    mu_tilde = float(rng.exponential(1.0 / hyper.mu_tilde_rate))
    mu0 = float(rng.exponential(1.0 / hyper.mu0_rate))
    n0 = float(rng.exponential(1.0 / hyper.n0_rate))

    site = ctx.site_of_sample
    psi = np.clip(
        phi1[None, :] * (L[site] - lam[None, :]) + ctx.x_w @ phi,
        -PREDICTOR_CLAMP,
        PREDICTOR_CLAMP,
    )
    theta = 1.0 / (1.0 + np.exp(-psi))
    delta = (rng.random((ctx.n_samples, n_s)) < theta).astype(np.int8)
    delta[ctx.nc_mask] = 0
    gamma = np.zeros_like(delta)
    off = delta == 0
    gamma[off] = (
        rng.random(int(off.sum())) < np.broadcast_to(zeta, off.shape)[off]
    ).astype(np.int8)
    gamma[ctx.nc_mask] = 0

    mean_del = L[site] + ctx.x_w @ beta_w
    sd_v = np.where(
        delta == 1,
        np.sqrt(sigma_s_sq)[None, :],
        np.sqrt(hyper.nu_fixed),
    )
    mean_v = np.where(delta == 1, mean_del, mu_bar[None, :])
    v_bar = mean_v + sd_v * rng.standard_normal((ctx.n_samples, n_s))
    v_bar[(delta + gamma) == 0] = np.nan

    active_cell = ((delta + gamma) > 0)[ctx.sample_of_pcr]
    c = np.zeros((ctx.n_pcr, n_tot), dtype=np.int8)
    u_cell = rng.random((ctx.n_pcr, n_tot))
    p_row = np.broadcast_to(p, (ctx.n_pcr, n_tot))
    amp_pool = np.concatenate(
        [active_cell, np.ones((ctx.n_pcr, ctx.n_spikes), dtype=bool)],
        axis=1,
    )
    c[amp_pool & (u_cell < p_row)] = 1
    off_pool = ~active_cell
    q_row = np.broadcast_to(q, (ctx.n_pcr, n_s))
    noise = off_pool & (u_cell[:, :n_s] < q_row)
    c[:, :n_s][noise] = 2

    state = MS(
        lam=lam.copy(),
        beta0_bar=beta0,
        B=B,
        L_bar=L,
        gh=gh,
        sigma_u_sq=sigma_u_sq,
        u=u,
        v_bar=v_bar,
        delta=delta,
        gamma=gamma,
        c=c,
        eta=np.full((ctx.n_pcr, n_tot), np.nan),
        r=r,
        beta_w=beta_w,
        sigma_s_sq=sigma_s_sq,
        mu_bar=mu_bar,
        nu_sq=float(hyper.nu_fixed),
        phi1=phi1,
        phi=phi,
        zeta=zeta,
        p=p,
        q=q,
        pi=pi,
        mu0=mu0,
        n0=n0,
        mu_tilde=mu_tilde,
        omega=np.zeros((ctx.n_samples, n_s)),
    )

    m = read_log_means(state, ctx)
    c1 = state.c == 1
    mm = np.clip(m[c1], -PREDICTOR_CLAMP, PREDICTOR_CLAMP)
    r_cell = np.broadcast_to(state.r, state.c.shape)[c1]
    state.eta[c1] = rng.gamma(r_cell) / (r_cell * np.exp(-mm))
    return state


def draw_reads(
    state: ModelState, ctx: ModelContext, rng: np.random.Generator
) -> np.ndarray:
    """Simulate the read matrix from the model given the full state."""
    y = np.zeros((ctx.n_pcr, ctx.n_species_total), dtype=np.int64)
    c = state.c

    c1 = c == 1
    lam_pois = np.minimum(np.nan_to_num(state.eta), _POISSON_CAP)
    y[c1] = rng.poisson(lam_pois[c1])

    c0 = c == 0
    n0_cells = int(c0.sum())
    if n0_cells:
        nonzero = rng.random(n0_cells) >= state.pi
        extra = np.zeros(n0_cells, dtype=np.int64)
        k = int(nonzero.sum())
        if k:
            prob = state.n0 / (state.n0 + state.mu0)
            extra[nonzero] = 1 + rng.negative_binomial(state.n0, prob, k)
        y[c0] = extra

    c2 = c == 2
    n2_cells = int(c2.sum())
    if n2_cells:
        y[c2] = rng.poisson(state.mu_tilde, n2_cells)
    return y


def context_with_reads(ctx: ModelContext, reads: np.ndarray) -> ModelContext:
    """Same survey layout with a replaced read matrix."""
    import dataclasses

    reads = np.asarray(reads, dtype=np.int64)
    reads_f = reads.astype(float)
    return dataclasses.replace(
        ctx,
        reads=reads,
        reads_f=reads_f,
        log_y_fact=gammaln(reads_f + 1.0),
    )
