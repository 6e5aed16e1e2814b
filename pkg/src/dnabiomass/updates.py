"""All conditional updates of the read-count model sampler.

Every function takes the mutable chain state, the immutable context, and a
generator, mutates the state in place, and returns it. Batch RNG for the
vectorised Metropolis kernels is drawn here and handed to the backend
kernels, which are deterministic given those arrays.

Lexicon used throughout: "active" cell means a (sample, species) pair whose
presence or contamination indicator is on (a latent sample quantity
exists); "amplified" cell means a PCR outcome code of 1; outcome code 2 is
a noise amplification; code 0 produces reads from the zero model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import gammaln, logsumexp

from ._backend import kernels
from .matnorm import gh_update_precision
from .state import PREDICTOR_CLAMP, ChainConfig, ModelContext, ModelState

__all__ = [
    "update_eta",
    "update_v_u_block",
    "update_lbar",
    "update_B0_B",
    "update_beta_w",
    "update_sigma_s",
    "update_mu_bar",
    "update_lambda",
    "update_r",
    "update_phi",
    "update_indicators_block",
    "update_indicators_sweep",
    "update_bernoulli_probs",
    "update_noise_params",
    "update_sigma_u",
    "AdaptState",
]

_PROB_EPS = 1e-12


def _clip_m(m):
    return np.clip(m, -PREDICTOR_CLAMP, PREDICTOR_CLAMP)


def read_log_means(state: ModelState, ctx: ModelContext) -> np.ndarray:
    """Per-cell linear predictor v + u + offset; NaN where no latent exists."""
    j = ctx.sample_of_pcr
    base = (state.u + ctx.offsets)[:, None]
    if ctx.n_spikes:
        v_all = np.hstack([state.v_bar[j], ctx.spike_v[j]])
    else:
        v_all = state.v_bar[j]
    return v_all + base


def nb_log_pmf(y, log_y_fact, m, r):
    """Negative binomial log pmf with mean exp(m) and size r."""
    m = _clip_m(m)
    log_r = np.log(r)
    log_denom = np.logaddexp(log_r, m)
    return (
        gammaln(y + r)
        - gammaln(r)
        - log_y_fact
        + r * (log_r - log_denom)
        + y * (m - log_denom)
    )


def zero_model_log_pmf(y, log_pi, log_1mpi, mu0, n0):
    """Zero model: point mass at 0, else one plus a negative binomial."""
    y = np.asarray(y, dtype=float)
    shifted = np.maximum(y - 1.0, 0.0)
    log_nb = (
        gammaln(shifted + n0)
        - gammaln(n0)
        - gammaln(shifted + 1.0)
        + n0 * (np.log(n0) - np.log(n0 + mu0))
        + shifted * (np.log(mu0) - np.log(n0 + mu0))
    )
    return np.where(y == 0, log_pi, log_1mpi + log_nb)


def poisson_log_pmf(y, log_y_fact, mean):
    return y * np.log(mean) - mean - log_y_fact


def _cell_segment_sum(per_cell: np.ndarray, ctx: ModelContext) -> np.ndarray:
    """Sum per-cell values over the PCR rows of each sample."""
    return np.add.reduceat(per_cell, ctx.pcr_start[:-1], axis=0)


def _precision_draw(fac, rhs, z):
    """Draw N(prec^{-1} rhs, prec^{-1}) from a Cholesky factor of prec."""
    mean = cho_solve(fac, rhs)
    return mean + solve_triangular(fac[0], z, lower=True, trans=1)


# -- Adaptation bookkeeping ------------------------------------------------


@dataclass
class AdaptState:
    """Random-walk scales, their acceptance counters, and indicator history."""

    step_lam: np.ndarray
    step_r: np.ndarray
    step_noise: np.ndarray  # mu_tilde, mu0, n0
    acc_lam: np.ndarray = field(default=None)
    acc_r: np.ndarray = field(default=None)
    acc_noise: np.ndarray = field(default=None)
    batch: int = 0
    n_since: int = 0
    indicator_counts: np.ndarray = None  # (J, S, n_codes)
    indicator_cum: np.ndarray = None  # snapshot cumulative proposal probs
    n_codes_per_sample: np.ndarray = None
    clamp_events: int = 0

    @staticmethod
    def create(ctx: ModelContext, config: ChainConfig) -> "AdaptState":
        n_s = ctx.n_species
        n_tot = ctx.n_species_total
        k_max = int(ctx.k_per_sample.max())
        n_codes = 3 * (2**k_max)
        if config.indicator_mode == "adaptive" and k_max > 12:
            raise ValueError(
                "adaptive indicator proposals support at most 12 PCR "
                "replicates per sample; use indicator_mode='gibbs'"
            )
        adapt = AdaptState(
            step_lam=np.full(n_s, 0.3),
            step_r=np.full(n_tot, 0.3),
            step_noise=np.full(3, 0.3),
        )
        adapt.acc_lam = np.zeros(n_s)
        adapt.acc_r = np.zeros(n_tot)
        adapt.acc_noise = np.zeros(3)
        if config.indicator_mode != "gibbs" and k_max <= 12:
            adapt.indicator_counts = np.zeros(
                (ctx.n_samples, n_s, n_codes), dtype=np.float64
            )
        adapt.n_codes_per_sample = 3 * (2**ctx.k_per_sample)
        return adapt

    def tune(self, target: float) -> None:
        """Robbins-Monro step-size adjustment toward the target rate."""
        self.batch += 1
        gain = 1.0 / np.sqrt(self.batch)
        denom = max(self.n_since, 1)
        for step, acc in (
            (self.step_lam, self.acc_lam),
            (self.step_r, self.acc_r),
            (self.step_noise, self.acc_noise),
        ):
            rate = acc / denom
            step *= np.exp(gain * (rate - target))
            np.clip(step, 1e-4, 50.0, out=step)
            acc[:] = 0.0
        self.n_since = 0

    def refresh_indicator_snapshot(self, epsilon: float) -> None:
        """Rebuild the cumulative proposal table from accumulated counts."""
        counts = self.indicator_counts
        if counts is None:
            return
        totals = counts.sum(axis=2, keepdims=True)
        n_codes = counts.shape[2]
        valid = (
            np.arange(n_codes)[None, :] < self.n_codes_per_sample[:, None]
        )[:, None, :]
        empirical = np.where(
            totals > 0, counts / np.maximum(totals, 1.0), 0.0
        )
        uniform = valid / self.n_codes_per_sample[:, None, None]
        probs = np.where(
            totals > 0,
            (1.0 - epsilon) * empirical + epsilon * uniform,
            uniform,
        )
        probs *= valid
        self.indicator_cum = np.cumsum(probs, axis=2)


# -- Conjugate updates -----------------------------------------------------


def update_eta(state: ModelState, ctx: ModelContext, rng) -> ModelState:
    """Exact Gamma draw of the Poisson-Gamma latent in every amplified cell."""
    m = read_log_means(state, ctx)
    mask = state.c == 1
    mm = _clip_m(m[mask])
    r_cell = np.broadcast_to(state.r, state.c.shape)[mask]
    y_cell = ctx.reads_f[mask]
    rate = 1.0 + r_cell * np.exp(-mm)
    state.eta[:] = np.nan
    state.eta[mask] = rng.gamma(r_cell + y_cell) / rate
    return state


def update_B0_B(state: ModelState, ctx: ModelContext, rng) -> ModelState:
    """Joint Gaussian draw of biomass intercepts and covariate coefficients.

    The matrix-normal likelihood gives a Kronecker precision (species
    precision times the covariate Gram); the Gaussian prior (intercepts
    centred at the species levels) adds a diagonal.
    """
    hyper = ctx.hyper
    n_s = ctx.n_species
    d_cov = ctx.xbar.shape[1]
    prec = np.kron(state.gh.precision, ctx.gram_xbar) + np.eye(
        d_cov * n_s
    ) / hyper.sigma_beta_sq
    prior_mean = np.zeros((d_cov, n_s))
    prior_mean[0] = state.lam
    lin = (
        ctx.sigma_inv_xbar.T @ state.L_bar @ state.gh.precision
    ).ravel(order="F") + prior_mean.ravel(order="F") / hyper.sigma_beta_sq
    fac = cho_factor(prec, lower=True)
    z = rng.standard_normal(lin.size)
    draw = _precision_draw(fac, lin, z)
    coef = draw.reshape(d_cov, n_s, order="F")
    state.beta0_bar = coef[0].copy()
    state.B = coef[1:].copy()
    return state


def update_beta_w(state: ModelState, ctx: ModelContext, rng) -> ModelState:
    """Gaussian conjugate draw of the collection covariate coefficients."""
    n_w = ctx.x_w.shape[1]
    if n_w == 0:
        return state
    hyper = ctx.hyper
    site = ctx.site_of_sample
    for s in range(ctx.n_species):
        rows = state.delta[:, s] == 1
        prec = np.eye(n_w) / hyper.sigma_beta_sq
        rhs = np.zeros(n_w)
        if np.any(rows):
            x = ctx.x_w[rows]
            resid = state.v_bar[rows, s] - state.L_bar[site[rows], s]
            prec += x.T @ x / state.sigma_s_sq[s]
            rhs = x.T @ resid / state.sigma_s_sq[s]
        fac = cho_factor(prec, lower=True)
        z = rng.standard_normal(n_w)
        state.beta_w[:, s] = _precision_draw(fac, rhs, z)
    return state


def update_sigma_s(state: ModelState, ctx: ModelContext, rng) -> ModelState:
    """Inverse-gamma draw of each species' sample noise variance."""
    hyper = ctx.hyper
    site = ctx.site_of_sample
    for s in range(ctx.n_species):
        rows = state.delta[:, s] == 1
        n_cells = int(rows.sum())
        rss = 0.0
        if n_cells:
            mean = state.L_bar[site[rows], s] + ctx.x_w[rows] @ state.beta_w[:, s]
            rss = float(np.sum((state.v_bar[rows, s] - mean) ** 2))
        shape = hyper.a_sigma + 0.5 * n_cells
        scale = hyper.b_sigma + 0.5 * rss
        state.sigma_s_sq[s] = scale / rng.gamma(shape)
    return state


def update_mu_bar(state: ModelState, ctx: ModelContext, rng) -> ModelState:
    """Normal conjugate draw of each species' contamination level."""
    hyper = ctx.hyper
    prior_prec = 1.0 / hyper.sigma_mu**2
    for s in range(ctx.n_species):
        rows = state.gamma[:, s] == 1
        n_cells = int(rows.sum())
        prec = prior_prec + n_cells / state.nu_sq
        mean = (
            prior_prec * state.lam[s]
            + np.sum(state.v_bar[rows, s]) / state.nu_sq
        ) / prec
        state.mu_bar[s] = mean + rng.standard_normal() / np.sqrt(prec)
    return state


def update_sigma_u(state: ModelState, ctx: ModelContext, rng) -> ModelState:
    """Inverse-gamma draw of the pipeline effect variance."""
    hyper = ctx.hyper
    shape = hyper.a_u + 0.5 * ctx.n_pcr
    scale = hyper.b_u + 0.5 * float(np.sum(state.u**2))
    state.sigma_u_sq = scale / rng.gamma(shape)
    return state


def update_bernoulli_probs(state: ModelState, ctx: ModelContext, rng) -> ModelState:
    """Beta draws of the amplification, noise, contamination, zero weights."""
    hyper = ctx.hyper
    n_s = ctx.n_species
    j_of_t = ctx.sample_of_pcr

    active = (state.delta + state.gamma) > 0  # (J, S)
    active_cells = active[j_of_t]
    c_t = state.c[:, :n_s]

    # Amplification probability per species (spike-ins use all their cells).
    n_amp = np.sum((c_t == 1) & active_cells, axis=0).astype(float)
    n_tot = np.sum(active_cells, axis=0).astype(float)
    if ctx.n_spikes:
        n_amp = np.concatenate(
            [n_amp, np.sum(state.c[:, n_s:] == 1, axis=0).astype(float)]
        )
        n_tot = np.concatenate(
            [n_tot, np.full(ctx.n_spikes, float(ctx.n_pcr))]
        )
    state.p = rng.beta(hyper.a_p + n_amp, hyper.b_p + n_tot - n_amp)

    # Noise amplification over cells with both indicators off.
    off_cells = ~active_cells
    n_noise = np.sum((c_t == 2) & off_cells, axis=0).astype(float)
    n_off = np.sum(off_cells, axis=0).astype(float)
    state.q = rng.beta(hyper.a_q + n_noise, hyper.b_q + n_off - n_noise)

    # Contamination probability over non-control samples without presence.
    eligible = (state.delta == 0) & ctx.active_mask[:, None]
    n_gam = np.sum((state.gamma == 1) & eligible, axis=0).astype(float)
    n_elig = np.sum(eligible, axis=0).astype(float)
    state.zeta = rng.beta(hyper.a_zeta + n_gam, hyper.b_zeta + n_elig - n_gam)

    # Zero-model weight over every cell with outcome 0 (all species).
    zero_cells = state.c == 0
    m0_count = float(np.sum(zero_cells))
    n0_count = float(np.sum(zero_cells & (ctx.reads == 0)))
    state.pi = rng.beta(
        hyper.a_pi + n0_count, hyper.b_pi + m0_count - n0_count
    )

    state.p = np.clip(state.p, _PROB_EPS, 1.0 - _PROB_EPS)
    state.q = np.clip(state.q, _PROB_EPS, 1.0 - _PROB_EPS)
    state.zeta = np.clip(state.zeta, _PROB_EPS, 1.0 - _PROB_EPS)
    state.pi = float(np.clip(state.pi, _PROB_EPS, 1.0 - _PROB_EPS))
    return state


# -- Metropolis updates ----------------------------------------------------


def update_v_u_block(
    state: ModelState,
    ctx: ModelContext,
    rng,
    config: ChainConfig,
) -> ModelState:
    """Factor-average pair move followed by element-wise latent updates.

    Per sample, the mean of the active latent sample quantities and the
    mean of its pipeline effects are moved jointly (the crossed-effects
    bottleneck direction), then every latent quantity and every pipeline
    effect takes a scalar Laplace-MH step.
    """
    site = ctx.site_of_sample

    active = (state.delta + state.gamma) > 0
    mean_del = state.L_bar[site] + ctx.x_w @ state.beta_w  # (J, S)
    prior_mean = np.where(state.delta == 1, mean_del, state.mu_bar[None, :])
    prior_var = np.where(
        state.delta == 1, state.sigma_s_sq[None, :], state.nu_sq
    )

    if config.factor_step:
        _factor_pair_move(state, ctx, rng, config, active, prior_mean, prior_var)

    _element_v_move(state, ctx, rng, config, active, prior_mean, prior_var)
    _element_u_move(state, ctx, rng, config)
    return state


def _factor_pair_move(state, ctx, rng, config, active, prior_mean, prior_var):
    n_s = ctx.n_species
    n_samples = ctx.n_samples
    j_of_t = ctx.sample_of_pcr

    n_active = active.sum(axis=1)
    with np.errstate(invalid="ignore"):
        v_hat = np.where(
            n_active > 0,
            np.nansum(np.where(active, state.v_bar, 0.0), axis=1)
            / np.maximum(n_active, 1),
            0.0,
        )
    u_hat = (
        np.add.reduceat(state.u, ctx.pcr_start[:-1]) / ctx.k_per_sample
    )

    inv_var = np.where(active, 1.0 / prior_var, 0.0)
    wv = inv_var.sum(axis=1)
    # Prior of the latent-quantity mean given the increments.
    mv = np.where(
        n_active > 0,
        np.sum(
            np.where(active, (prior_mean - np.nan_to_num(state.v_bar)), 0.0)
            * inv_var,
            axis=1,
        )
        / np.maximum(wv, 1e-300)
        + v_hat,
        0.0,
    )
    # Samples with no active species get a unit pseudo-prior on the unused
    # coordinate; the proposal then matches it exactly and contributes
    # nothing to the acceptance ratio.
    wv = np.where(n_active > 0, wv, 1.0)
    mv = np.where(n_active > 0, mv, 0.0)
    wu = ctx.k_per_sample / state.sigma_u_sq

    m_all = read_log_means(state, ctx)
    c1 = state.c == 1
    r_row = np.broadcast_to(state.r, state.c.shape)
    t_sum = (v_hat + u_hat)[j_of_t]

    tgt = c1[:, :n_s]
    with np.errstate(over="ignore", invalid="ignore"):
        shift1 = np.where(
            tgt, np.exp(_clip_shift(-(m_all[:, :n_s] - t_sum[:, None]))), 0.0
        )
    a1 = _cell_segment_sum(
        np.where(tgt, r_row[:, :n_s], 0.0), ctx
    ).sum(axis=1)
    b1 = _cell_segment_sum(
        np.where(tgt, r_row[:, :n_s] * np.nan_to_num(state.eta[:, :n_s]), 0.0)
        * shift1,
        ctx,
    ).sum(axis=1)

    if ctx.n_spikes:
        spk = c1[:, n_s:]
        shift2 = np.where(
            spk,
            np.exp(_clip_shift(-(m_all[:, n_s:] - u_hat[j_of_t][:, None]))),
            0.0,
        )
        a2 = _cell_segment_sum(
            np.where(spk, r_row[:, n_s:], 0.0), ctx
        ).sum(axis=1)
        b2 = _cell_segment_sum(
            np.where(spk, r_row[:, n_s:] * np.nan_to_num(state.eta[:, n_s:]), 0.0)
            * shift2,
            ctx,
        ).sum(axis=1)
    else:
        a2 = np.zeros(n_samples)
        b2 = np.zeros(n_samples)

    z1 = rng.standard_normal(n_samples)
    z2 = rng.standard_normal(n_samples)
    log_u = np.log(rng.random(n_samples))
    new_v, new_u, accepted = kernels.factor_pair_laplace(
        v_hat,
        u_hat,
        wv,
        mv,
        wu,
        a1,
        b1,
        a2,
        b2,
        z1,
        z2,
        log_u,
        config.laplace_max_iter,
    )
    dv = np.where(accepted & (n_active > 0), new_v - v_hat, 0.0)
    du = np.where(accepted, new_u - u_hat, 0.0)
    state.v_bar += np.where(active, dv[:, None], 0.0)
    state.u += du[j_of_t]


def _clip_shift(x):
    return np.clip(x, -690.0, 690.0)


def _element_v_move(state, ctx, rng, config, active, prior_mean, prior_var):
    n_s = ctx.n_species
    c1 = state.c[:, :n_s] == 1
    r_row = state.r[:n_s][None, :]
    uo = (state.u + ctx.offsets)[:, None]
    weight = np.where(
        c1,
        r_row * np.nan_to_num(state.eta[:, :n_s]) * np.exp(_clip_shift(-uo)),
        0.0,
    )
    b_sum = _cell_segment_sum(weight, ctx)
    a_sum = _cell_segment_sum(np.where(c1, r_row, 0.0), ctx)

    idx = np.where(active)
    if idx[0].size == 0:
        return
    x = state.v_bar[idx]
    z = rng.standard_normal(x.size)
    log_u = np.log(rng.random(x.size))
    new_x, _ = kernels.exp_family_laplace(
        x,
        1.0 / prior_var[idx],
        prior_mean[idx],
        a_sum[idx],
        b_sum[idx],
        z,
        log_u,
        config.laplace_max_iter,
    )
    state.v_bar[idx] = new_x


def _element_u_move(state, ctx, rng, config):
    m_all = read_log_means(state, ctx)
    c1 = state.c == 1
    r_row = np.broadcast_to(state.r, state.c.shape)
    rel = np.where(
        c1,
        r_row
        * np.nan_to_num(state.eta)
        * np.exp(_clip_shift(-(m_all - state.u[:, None]))),
        0.0,
    )
    b_sum = rel.sum(axis=1)
    a_sum = np.where(c1, r_row, 0.0).sum(axis=1)

    z = rng.standard_normal(ctx.n_pcr)
    log_u = np.log(rng.random(ctx.n_pcr))
    new_u, _ = kernels.exp_family_laplace(
        state.u,
        np.full(ctx.n_pcr, 1.0 / state.sigma_u_sq),
        np.zeros(ctx.n_pcr),
        a_sum,
        b_sum,
        z,
        log_u,
        config.laplace_max_iter,
    )
    state.u = new_u


def update_lbar(
    state: ModelState, ctx: ModelContext, rng, config: ChainConfig
) -> ModelState:
    """Sequential Laplace-MH scan over the latent biomass matrix."""
    from .matnorm import leave_one_out_solves

    n_s = ctx.n_species
    site = ctx.site_of_sample
    coef = np.vstack([state.beta0_bar[None, :], state.B])
    prior_mean = ctx.xbar @ coef

    t_cov = np.linalg.inv(state.gh.precision)
    t_cov = 0.5 * (t_cov + t_cov.T)
    col_solves, col_scalars = leave_one_out_solves(t_cov)
    col_mat = np.zeros((n_s, n_s))
    idx = np.arange(n_s)
    for s, w in enumerate(col_solves):
        col_mat[s, idx != s] = w

    # Gaussian data terms from present-species latent quantities.
    deltaf = state.delta.astype(float)
    resid = np.nan_to_num(state.v_bar) - ctx.x_w @ state.beta_w
    w_cell = deltaf / state.sigma_s_sq[None, :]
    w_data = np.zeros((ctx.n_sites, n_s))
    lin_data = np.zeros((ctx.n_sites, n_s))
    np.add.at(w_data, site, w_cell)
    np.add.at(lin_data, site, w_cell * resid)

    if config.error_free:
        phi1 = np.zeros(n_s)
        base = np.zeros((ctx.n_samples, n_s))
    else:
        phi1 = state.phi1
        base = ctx.x_w @ state.phi - state.phi1[None, :] * state.lam[None, :]

    z = rng.standard_normal((ctx.n_sites, n_s))
    log_u = np.log(rng.random((ctx.n_sites, n_s)))
    kernels.lbar_scan(
        state.L_bar,
        prior_mean,
        ctx.row_loo_mat,
        ctx.row_loo_scal,
        col_mat,
        col_scalars,
        w_data,
        lin_data,
        phi1,
        base,
        deltaf,
        ctx.active_mask.astype(float),
        ctx.site_sample_start,
        z,
        log_u,
        config.laplace_max_iter,
    )
    return state


def update_lambda(
    state: ModelState,
    ctx: ModelContext,
    rng,
    config: ChainConfig,
    adapt: AdaptState,
) -> ModelState:
    """Random-walk update of the species amplification levels."""
    if not config.sample_lambda:
        return state
    hyper = ctx.hyper
    n_s = ctx.n_species
    lam = state.lam
    prop = lam + adapt.step_lam * rng.standard_normal(n_s)

    def log_target(lam_vec):
        out = -0.5 * (state.beta0_bar - lam_vec) ** 2 / hyper.sigma_beta_sq
        out += -0.5 * (state.mu_bar - lam_vec) ** 2 / hyper.sigma_mu**2
        if not config.error_free:
            psi = _clip_m(
                state.phi1[None, :]
                * (state.L_bar[ctx.site_of_sample] - lam_vec[None, :])
                + ctx.x_w @ state.phi
            )
            terms = state.delta * psi - np.logaddexp(0.0, psi)
            out += np.sum(terms[ctx.active_mask], axis=0)
        return out

    log_ratio = log_target(prop) - log_target(lam)
    accepted = np.log(rng.random(n_s)) < log_ratio
    state.lam = np.where(accepted, prop, lam)
    adapt.acc_lam += accepted
    return state


def update_r(
    state: ModelState,
    ctx: ModelContext,
    rng,
    config: ChainConfig,
    adapt: AdaptState,
) -> ModelState:
    """Log-scale random-walk update of the NB sizes against the marginal."""
    hyper = ctx.hyper
    n_tot = ctx.n_species_total
    c1 = state.c == 1
    m_all = np.where(c1, np.nan_to_num(read_log_means(state, ctx)), 0.0)

    log_r = np.log(state.r)
    prop_log = log_r + adapt.step_r * rng.standard_normal(n_tot)
    r_prop = np.exp(prop_log)

    def log_target(r_vec, log_r_vec):
        prior = -0.5 * (r_vec - hyper.mu_r) ** 2 / hyper.sigma_r**2
        lik = nb_log_pmf(
            ctx.reads_f, ctx.log_y_fact, m_all, r_vec[None, :]
        )
        lik_sum = np.sum(np.where(c1, lik, 0.0), axis=0)
        return prior + lik_sum + log_r_vec

    log_ratio = log_target(r_prop, prop_log) - log_target(state.r, log_r)
    accepted = np.log(rng.random(n_tot)) < log_ratio
    state.r = np.where(accepted, r_prop, state.r)
    adapt.acc_r += accepted
    return state


def update_phi(
    state: ModelState, ctx: ModelContext, rng, config: ChainConfig
) -> ModelState:
    """Polya-Gamma augmented draw of the detection coefficients."""
    if config.error_free:
        return state
    hyper = ctx.hyper
    n_s = ctx.n_species
    n_w = ctx.x_w.shape[1]
    rows = ctx.active_mask
    x_rows = ctx.x_w[rows]
    l_rows = state.L_bar[ctx.site_of_sample][rows]
    d_rows = state.delta[rows].astype(float)
    n_rows = int(rows.sum())
    if n_rows == 0:
        cov = hyper.sigma_phi_sq
        state.phi1 = rng.standard_normal(n_s) * np.sqrt(cov)
        state.phi = rng.standard_normal((n_w, n_s)) * np.sqrt(cov)
        return state

    psi = _clip_m(
        state.phi1[None, :] * (l_rows - state.lam[None, :]) + x_rows @ state.phi
    )
    omega = kernels.pg_draws(psi.ravel(), rng).reshape(psi.shape)
    state.omega[rows] = omega

    kappa = d_rows - 0.5
    for s in range(n_s):
        design = np.hstack([(l_rows[:, s] - state.lam[s])[:, None], x_rows])
        prec = design.T @ (design * omega[:, s][:, None]) + np.eye(
            1 + n_w
        ) / hyper.sigma_phi_sq
        rhs = design.T @ kappa[:, s]
        fac = cho_factor(prec, lower=True)
        draw = _precision_draw(fac, rhs, rng.standard_normal(1 + n_w))
        state.phi1[s] = draw[0]
        state.phi[:, s] = draw[1:]
    return state


def update_noise_params(
    state: ModelState,
    ctx: ModelContext,
    rng,
    config: ChainConfig,
    adapt: AdaptState,
) -> ModelState:
    """Log-scale random walks for the noise-read and zero-model parameters."""
    hyper = ctx.hyper
    n_s = ctx.n_species
    c_t = state.c[:, :n_s]

    noise_cells = c_t == 2
    y_noise = ctx.reads_f[:, :n_s][noise_cells]
    n_noise = y_noise.size
    sum_y_noise = float(y_noise.sum())

    def mu_tilde_target(val, log_val):
        return (
            -hyper.mu_tilde_rate * val
            + sum_y_noise * log_val
            - n_noise * val
            + log_val
        )

    log_cur = np.log(state.mu_tilde)
    prop_log = log_cur + adapt.step_noise[0] * rng.standard_normal()
    if np.log(rng.random()) < mu_tilde_target(
        np.exp(prop_log), prop_log
    ) - mu_tilde_target(state.mu_tilde, log_cur):
        state.mu_tilde = float(np.exp(prop_log))
        adapt.acc_noise[0] += 1.0

    zero_pos = (state.c == 0) & (ctx.reads >= 1)
    y_pos = ctx.reads_f[zero_pos] - 1.0

    def zero_nb_loglik(mu0, n0):
        if y_pos.size == 0:
            return 0.0
        return float(
            np.sum(
                gammaln(y_pos + n0)
                - gammaln(n0)
                - gammaln(y_pos + 1.0)
                + n0 * (np.log(n0) - np.log(n0 + mu0))
                + y_pos * (np.log(mu0) - np.log(n0 + mu0))
            )
        )

    log_mu0 = np.log(state.mu0)
    prop_log = log_mu0 + adapt.step_noise[1] * rng.standard_normal()
    mu0_prop = float(np.exp(prop_log))
    log_ratio = (
        -hyper.mu0_rate * mu0_prop
        + zero_nb_loglik(mu0_prop, state.n0)
        + prop_log
    ) - (
        -hyper.mu0_rate * state.mu0
        + zero_nb_loglik(state.mu0, state.n0)
        + log_mu0
    )
    if np.log(rng.random()) < log_ratio:
        state.mu0 = mu0_prop
        adapt.acc_noise[1] += 1.0

    log_n0 = np.log(state.n0)
    prop_log = log_n0 + adapt.step_noise[2] * rng.standard_normal()
    n0_prop = float(np.exp(prop_log))
    log_ratio = (
        -hyper.n0_rate * n0_prop
        + zero_nb_loglik(state.mu0, n0_prop)
        + prop_log
    ) - (
        -hyper.n0_rate * state.n0
        + zero_nb_loglik(state.mu0, state.n0)
        + log_n0
    )
    if np.log(rng.random()) < log_ratio:
        state.n0 = n0_prop
        adapt.acc_noise[2] += 1.0
    return state


# -- Indicator block -------------------------------------------------------


def _indicator_likelihoods(state, ctx, v_cand):
    """Per-cell log likelihoods for the three outcome codes at v_cand."""
    n_s = ctx.n_species
    j_of_t = ctx.sample_of_pcr
    y = ctx.reads_f[:, :n_s]
    lf = ctx.log_y_fact[:, :n_s]
    m_cand = v_cand[j_of_t] + (state.u + ctx.offsets)[:, None]
    lik1 = nb_log_pmf(y, lf, m_cand, state.r[:n_s][None, :])
    log_pi = np.log(state.pi)
    log_1mpi = np.log1p(-state.pi)
    lik0 = zero_model_log_pmf(y, log_pi, log_1mpi, state.mu0, state.n0)
    lik2 = poisson_log_pmf(y, lf, state.mu_tilde)
    return lik1, lik0, lik2


def update_indicators_sweep(
    state: ModelState,
    ctx: ModelContext,
    rng,
    config: ChainConfig,
    adapt: AdaptState,
    adaptive: bool,
) -> ModelState:
    """One pass of indicator updates over every sample and species.

    Non-control samples and target species get the joint family move
    (present / contaminated / off, with the whole PCR outcome vector and
    the latent quantity on dimension changes). Negative-control target
    cells and spike-in cells get exact per-cell outcome draws.
    """
    n_s = ctx.n_species
    if n_s and np.any(ctx.active_mask):
        if adaptive:
            _indicator_adaptive_pass(state, ctx, rng, config, adapt)
        else:
            _indicator_gibbs_pass(state, ctx, rng, config, adapt)
    _indicator_nc_pass(state, ctx, rng)
    _indicator_spike_pass(state, ctx, rng)
    update_eta(state, ctx, rng)
    return state


def _qv_params(state, ctx):
    """Mean of the informed latent-quantity proposal per (sample, species)."""
    n_s = ctx.n_species
    corrected = ctx.reads_f[:, :n_s] * np.exp(
        _clip_shift(-(state.u + ctx.offsets))
    )[:, None]
    mean_y = (
        _cell_segment_sum(corrected, ctx) / ctx.k_per_sample[:, None]
    )
    return np.log(mean_y + 0.05)


_QV_SD = 0.5


def _log_qv(v, qv_mean):
    return (
        -0.5 * np.log(2.0 * np.pi)
        - np.log(_QV_SD)
        - 0.5 * ((v - qv_mean) / _QV_SD) ** 2
    )


def _log_normal(v, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (v - mean) ** 2 / var)


def _indicator_common(state, ctx):
    n_s = ctx.n_species
    site = ctx.site_of_sample
    psi = _clip_m(
        state.phi1[None, :] * (state.L_bar[site] - state.lam[None, :])
        + ctx.x_w @ state.phi
    )
    log_theta = psi - np.logaddexp(0.0, psi)
    log_1m_theta = -np.logaddexp(0.0, psi)
    log_zeta = np.log(state.zeta)[None, :]
    log_1m_zeta = np.log1p(-state.zeta)[None, :]
    log_f1 = log_theta
    log_f2 = log_1m_theta + log_zeta
    log_f3 = log_1m_theta + log_1m_zeta

    mean1 = state.L_bar[site] + ctx.x_w @ state.beta_w
    var1 = np.broadcast_to(state.sigma_s_sq[None, :], mean1.shape)
    mean2 = np.broadcast_to(state.mu_bar[None, :], mean1.shape)
    var2 = np.full_like(mean1, state.nu_sq)

    log_p = np.log(state.p[:n_s])[None, :]
    log_1mp = np.log1p(-state.p[:n_s])[None, :]
    log_q = np.log(state.q)[None, :]
    log_1mq = np.log1p(-state.q)[None, :]
    return (
        log_f1,
        log_f2,
        log_f3,
        mean1,
        var1,
        mean2,
        var2,
        log_p,
        log_1mp,
        log_q,
        log_1mq,
    )


def _encode_codes(state, ctx, n_s):
    """Current (family, outcome bits) code per (sample, species)."""
    fam = np.where(
        state.delta == 1, 0, np.where(state.gamma == 1, 1, 2)
    ).astype(np.int64)
    bits_cell = (
        (state.c[:, :n_s] > 0).astype(np.int64)
        << ctx.slot_of_pcr[:, None]
    )
    bits = np.add.reduceat(bits_cell, ctx.pcr_start[:-1], axis=0)
    return fam * (2 ** ctx.k_per_sample)[:, None] + bits, fam, bits


def _indicator_gibbs_pass(state, ctx, rng, config, adapt):
    n_s = ctx.n_species
    j_act = ctx.active_mask
    (
        log_f1,
        log_f2,
        log_f3,
        mean1,
        var1,
        mean2,
        var2,
        log_p,
        log_1mp,
        log_q,
        log_1mq,
    ) = _indicator_common(state, ctx)

    qv_mean = _qv_params(state, ctx)
    active = (state.delta + state.gamma) > 0
    z_birth = rng.standard_normal((ctx.n_samples, n_s))
    v_cand = np.where(active, state.v_bar, qv_mean + _QV_SD * z_birth)

    lik1, lik0, lik2 = _indicator_likelihoods(state, ctx, v_cand)
    log_w1 = np.logaddexp(log_p + lik1, log_1mp + lik0)
    log_w3 = np.logaddexp(log_q + lik2, log_1mq + lik0)
    sum_w1 = _cell_segment_sum(log_w1, ctx)
    sum_w3 = _cell_segment_sum(log_w3, ctx)

    log_qv = _log_qv(v_cand, qv_mean)
    lg1 = log_f1 + _log_normal(v_cand, mean1, var1) - log_qv + sum_w1
    lg2 = log_f2 + _log_normal(v_cand, mean2, var2) - log_qv + sum_w1
    lg3 = log_f3 + sum_w3

    stacked = np.stack([lg1, lg2, lg3], axis=0)
    norm = logsumexp(stacked, axis=0)
    p1 = np.exp(lg1 - norm)
    p2 = np.exp(lg2 - norm)
    u_fam = rng.random((ctx.n_samples, n_s))
    fam_new = np.where(u_fam < p1, 0, np.where(u_fam < p1 + p2, 1, 2))

    # Per-cell outcome draws given the family.
    u_cell = rng.random((ctx.n_pcr, n_s))
    p_amp = np.exp(log_p + lik1 - log_w1)
    p_noise = np.exp(log_q + lik2 - log_w3)
    fam_cell = fam_new[ctx.sample_of_pcr]
    c_new = np.where(
        fam_cell < 2,
        (u_cell < p_amp).astype(np.int8),
        2 * (u_cell < p_noise).astype(np.int8),
    )

    apply_js = j_act[:, None] & np.ones((1, n_s), dtype=bool)
    _apply_indicator_state(
        state, ctx, apply_js, fam_new, v_cand, c_new, n_s
    )
    _record_indicator_counts(state, ctx, adapt, n_s)


def _indicator_adaptive_pass(state, ctx, rng, config, adapt):
    n_s = ctx.n_species
    j_act = ctx.active_mask
    if adapt.indicator_cum is None:
        adapt.refresh_indicator_snapshot(config.indicator_epsilon)
    (
        log_f1,
        log_f2,
        log_f3,
        mean1,
        var1,
        mean2,
        var2,
        log_p,
        log_1mp,
        log_q,
        log_1mq,
    ) = _indicator_common(state, ctx)

    code_cur, fam_cur, _ = _encode_codes(state, ctx, n_s)

    u_code = rng.random((ctx.n_samples, n_s))
    code_prop = (
        adapt.indicator_cum < u_code[:, :, None]
    ).sum(axis=2)
    n_codes = adapt.n_codes_per_sample[:, None]
    code_prop = np.minimum(code_prop, n_codes - 1)

    two_k = (2 ** ctx.k_per_sample)[:, None]
    fam_prop = code_prop // two_k
    bits_prop = code_prop % two_k

    qv_mean = _qv_params(state, ctx)
    z_birth = rng.standard_normal((ctx.n_samples, n_s))
    v_birth = qv_mean + _QV_SD * z_birth

    birth = (fam_cur == 2) & (fam_prop < 2)
    death = (fam_cur < 2) & (fam_prop == 2)
    v_prop = np.where(
        fam_prop < 2,
        np.where(birth, v_birth, state.v_bar),
        np.nan,
    )

    v_cur_eval = np.where(fam_cur < 2, state.v_bar, 0.0)
    v_prop_eval = np.where(fam_prop < 2, np.nan_to_num(v_prop), 0.0)

    lik1_cur, lik0, lik2 = _indicator_likelihoods(state, ctx, v_cur_eval)
    lik1_prop, _, _ = _indicator_likelihoods(state, ctx, v_prop_eval)

    bit_cell_prop = (
        (bits_prop[ctx.sample_of_pcr] >> ctx.slot_of_pcr[:, None]) & 1
    ).astype(bool)
    c_cell_cur = state.c[:, :n_s]

    cell_cur = _cell_state_loglik(
        c_cell_cur == 1,
        c_cell_cur == 2,
        fam_cur[ctx.sample_of_pcr],
        lik1_cur,
        lik0,
        lik2,
        log_p,
        log_1mp,
        log_q,
        log_1mq,
    )
    cell_prop = _cell_state_loglik(
        bit_cell_prop & (fam_prop[ctx.sample_of_pcr] < 2),
        bit_cell_prop & (fam_prop[ctx.sample_of_pcr] == 2),
        fam_prop[ctx.sample_of_pcr],
        lik1_prop,
        lik0,
        lik2,
        log_p,
        log_1mp,
        log_q,
        log_1mq,
    )
    sum_cur = _cell_segment_sum(cell_cur, ctx)
    sum_prop = _cell_segment_sum(cell_prop, ctx)

    fam_log = np.stack([log_f1, log_f2, log_f3], axis=0)
    jj = np.arange(ctx.n_samples)[:, None]
    ss = np.arange(n_s)[None, :]
    log_pi_cur = fam_log[fam_cur, jj, ss] + sum_cur
    log_pi_prop = fam_log[fam_prop, jj, ss] + sum_prop

    log_pi_cur += np.where(
        fam_cur == 0,
        _log_normal(np.nan_to_num(state.v_bar), mean1, var1),
        np.where(
            fam_cur == 1,
            _log_normal(np.nan_to_num(state.v_bar), mean2, var2),
            0.0,
        ),
    )
    log_pi_prop += np.where(
        fam_prop == 0,
        _log_normal(v_prop_eval, mean1, var1),
        np.where(
            fam_prop == 1, _log_normal(v_prop_eval, mean2, var2), 0.0
        ),
    )

    prob_cur = _snapshot_prob(adapt, code_cur)
    prob_prop = _snapshot_prob(adapt, code_prop)

    log_ratio = (
        log_pi_prop
        - log_pi_cur
        + np.log(prob_cur)
        - np.log(prob_prop)
    )
    log_ratio -= np.where(birth, _log_qv(v_birth, qv_mean), 0.0)
    log_ratio += np.where(
        death, _log_qv(np.nan_to_num(state.v_bar), qv_mean), 0.0
    )

    accept = (np.log(rng.random((ctx.n_samples, n_s))) < log_ratio) & j_act[
        :, None
    ]

    fam_new = np.where(accept, fam_prop, fam_cur)
    v_new = np.where(accept, v_prop, state.v_bar)
    c_bits_new = np.where(
        accept[ctx.sample_of_pcr], bit_cell_prop, c_cell_cur > 0
    )
    fam_cell_new = fam_new[ctx.sample_of_pcr]
    c_new = np.where(
        c_bits_new, np.where(fam_cell_new < 2, 1, 2), 0
    ).astype(np.int8)

    _apply_indicator_state(state, ctx, accept, fam_new, v_new, c_new, n_s)
    _record_indicator_counts(state, ctx, adapt, n_s)


def _cell_state_loglik(
    amp, noise, fam_cell, lik1, lik0, lik2, log_p, log_1mp, log_q, log_1mq
):
    off_like = np.where(fam_cell < 2, log_1mp + lik0, log_1mq + lik0)
    return np.where(
        amp, log_p + lik1, np.where(noise, log_q + lik2, off_like)
    )


def _snapshot_prob(adapt, code):
    cum = adapt.indicator_cum
    jj = np.arange(cum.shape[0])[:, None]
    ss = np.arange(cum.shape[1])[None, :]
    hi = cum[jj, ss, code]
    lo = np.where(code > 0, cum[jj, ss, np.maximum(code - 1, 0)], 0.0)
    return np.maximum(hi - lo, 1e-300)


def _apply_indicator_state(state, ctx, apply_js, fam_new, v_new, c_new, n_s):
    """Write family, latent quantity, and outcomes back where selected."""
    delta_new = (fam_new == 0).astype(np.int8)
    gamma_new = (fam_new == 1).astype(np.int8)
    state.delta = np.where(apply_js, delta_new, state.delta)
    state.gamma = np.where(apply_js, gamma_new, state.gamma)
    v_masked = np.where(fam_new < 2, v_new, np.nan)
    state.v_bar = np.where(apply_js, v_masked, state.v_bar)
    apply_cell = apply_js[ctx.sample_of_pcr]
    state.c[:, :n_s] = np.where(apply_cell, c_new, state.c[:, :n_s])


def _record_indicator_counts(state, ctx, adapt, n_s):
    if adapt.indicator_counts is None:
        return
    code, _, _ = _encode_codes(state, ctx, n_s)
    jj = np.repeat(np.arange(ctx.n_samples), n_s)
    ss = np.tile(np.arange(n_s), ctx.n_samples)
    np.add.at(adapt.indicator_counts, (jj, ss, code.ravel()), 1.0)


def _indicator_nc_pass(state, ctx, rng):
    """Exact outcome draws for target cells of negative-control samples."""
    n_s = ctx.n_species
    rows = ctx.nc_mask[ctx.sample_of_pcr]
    if not np.any(rows):
        return
    y = ctx.reads_f[rows, :n_s]
    lf = ctx.log_y_fact[rows, :n_s]
    lik0 = zero_model_log_pmf(
        y, np.log(state.pi), np.log1p(-state.pi), state.mu0, state.n0
    )
    lik2 = poisson_log_pmf(y, lf, state.mu_tilde)
    log_q = np.log(state.q)[None, :]
    log_1mq = np.log1p(-state.q)[None, :]
    p_noise = np.exp(
        log_q + lik2 - np.logaddexp(log_q + lik2, log_1mq + lik0)
    )
    u = rng.random(p_noise.shape)
    state.c[np.ix_(rows, np.arange(n_s))] = 2 * (u < p_noise).astype(np.int8)


def _indicator_spike_pass(state, ctx, rng):
    """Exact outcome draws for spike-in cells (presence is known)."""
    n_s = ctx.n_species
    n_spk = ctx.n_spikes
    if n_spk == 0:
        return
    y = ctx.reads_f[:, n_s:]
    lf = ctx.log_y_fact[:, n_s:]
    m = ctx.spike_v[ctx.sample_of_pcr] + (state.u + ctx.offsets)[:, None]
    lik1 = nb_log_pmf(y, lf, m, state.r[n_s:][None, :])
    lik0 = zero_model_log_pmf(
        y, np.log(state.pi), np.log1p(-state.pi), state.mu0, state.n0
    )
    log_p = np.log(state.p[n_s:])[None, :]
    log_1mp = np.log1p(-state.p[n_s:])[None, :]
    p_amp = np.exp(
        log_p + lik1 - np.logaddexp(log_p + lik1, log_1mp + lik0)
    )
    u = rng.random(p_amp.shape)
    state.c[:, n_s:] = (u < p_amp).astype(np.int8)


def update_indicators_block(
    state: ModelState,
    ctx: ModelContext,
    rng,
    config: ChainConfig,
    adapt: AdaptState,
    sample: int,
    species: int,
    adaptive: bool = False,
) -> ModelState:
    """Indicator move restricted to one (sample, species) pair.

    The sweep-level pass vectorises over all pairs; this wrapper exists for
    unit-level verification and masks every other pair out by running the
    full pass on a state copy and keeping only the requested pair.
    """
    if ctx.nc_mask[sample]:
        _indicator_nc_pass(state, ctx, rng)
        return state
    before_delta = state.delta.copy()
    before_gamma = state.gamma.copy()
    before_v = state.v_bar.copy()
    before_c = state.c.copy()
    if adaptive:
        _indicator_adaptive_pass(state, ctx, rng, config, adapt)
    else:
        _indicator_gibbs_pass(state, ctx, rng, config, adapt)
    keep_js = np.zeros_like(before_delta, dtype=bool)
    keep_js[sample, species] = True
    keep_cell = keep_js[ctx.sample_of_pcr]
    n_s = ctx.n_species
    state.delta = np.where(keep_js, state.delta, before_delta)
    state.gamma = np.where(keep_js, state.gamma, before_gamma)
    state.v_bar = np.where(keep_js, state.v_bar, before_v)
    state.c[:, :n_s] = np.where(
        keep_cell, state.c[:, :n_s], before_c[:, :n_s]
    )
    state.c[:, n_s:] = before_c[:, n_s:]
    update_eta(state, ctx, rng)
    return state
