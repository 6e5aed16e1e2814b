"""Oracle tests for the Gibbs and Metropolis updates of the count model.

Two oracle styles are used. Conjugate updates are checked by stream
replication: the conditional parameters are derived independently from the
model definition and the exact draw is reproduced with an identically
seeded generator, so agreement is at floating-point precision. Metropolis
updates are checked against their stationary distribution: closed forms
where one exists, dense quadrature otherwise, with batch-means error bars
on long homogeneous chains.
"""

from __future__ import annotations

import copy
import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from dnabiomass import HyperParams, SimSettings, build_context, simulate_dataset
from dnabiomass._backend import kernels
from dnabiomass.matnorm import GhState, MatrixNormalParams, matnorm_conditional_scalar
from dnabiomass.state import ChainConfig
from dnabiomass.summaries import effective_sample_size
from dnabiomass.updates import (
    AdaptState,
    update_B0_B,
    update_bernoulli_probs,
    update_beta_w,
    update_eta,
    update_lambda,
    update_lbar,
    update_mu_bar,
    update_noise_params,
    update_phi,
    update_r,
    update_sigma_s,
    update_sigma_u,
    update_v_u_block,
)

from tests.conftest import batch_means_se, rng_pair, small_survey, survey_state


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def precision_draw_oracle(prec, rhs, z):
    """Independent N(prec^-1 rhs, prec^-1) draw from whitened noise z."""
    fac = cho_factor(prec, lower=True)
    return cho_solve(fac, rhs) + solve_triangular(fac[0], z, lower=True, trans=1)


def spike_survey(seed=11):
    """Survey exercising spikes, negative controls, and both covariates."""
    ctx, _ = small_survey(
        seed=seed,
        n_sites=4,
        n_species=2,
        m_samples=2,
        k_pcr=2,
        n_spikes=1,
        n_negative_controls=1,
        n_site_covariates=1,
        n_sample_covariates=1,
    )
    return ctx, survey_state(ctx, seed=seed + 1)


class TestEta:
    def test_matches_gamma_conditional_stream(self):
        ctx, state = spike_survey()
        assert (state.c == 1).any()
        rng1, rng2 = rng_pair(42)

        j = ctx.sample_of_pcr
        v_all = np.hstack([state.v_bar[j], ctx.spike_v[j]])
        m = v_all + (state.u + ctx.offsets)[:, None]
        mask = state.c == 1
        mm = np.clip(m[mask], -30.0, 30.0)
        r_cell = np.broadcast_to(state.r, state.c.shape)[mask]
        y_cell = ctx.reads_f[mask]
        expected = rng1.gamma(r_cell + y_cell) / (1.0 + r_cell * np.exp(-mm))

        update_eta(state, ctx, rng2)
        assert_allclose(state.eta[mask], expected, rtol=1e-12, atol=1e-10)
        assert np.isnan(state.eta[~mask]).all()

    def test_known_predictor_gives_hand_computed_rate(self):
        ctx, _ = small_survey(seed=5, n_sites=1, n_species=1, m_samples=1, k_pcr=2)
        state = survey_state(ctx, seed=6)
        state.delta[:] = 1
        state.gamma[:] = 0
        state.v_bar[:] = 7.0
        state.u[:] = 0.0
        state.c[:] = 1
        state.r[:] = 3.0
        rng1, rng2 = rng_pair(8)
        # With y = 0 the conditional is Gamma(r, 1 + r e^{-m}).
        rate = 1.0 + 3.0 * np.exp(-7.0)
        y = ctx.reads_f[state.c == 1]
        expected = rng1.gamma(3.0 + y) / rate
        update_eta(state, ctx, rng2)
        assert_allclose(state.eta[state.c == 1], expected, rtol=1e-12)


class TestInterceptsAndSlopes:
    def test_matches_kronecker_gaussian_stream(self):
        ctx, state = spike_survey(seed=13)
        prec_t = np.array([[1.4, -0.3], [-0.3, 0.9]])
        state.gh = dataclasses.replace(GhState.identity(2), precision=prec_t)
        rng1, rng2 = rng_pair(7)

        hyper = ctx.hyper
        d_cov = ctx.xbar.shape[1]
        n_s = ctx.n_species
        sig_inv_x = np.linalg.solve(ctx.sigma, ctx.xbar)
        gram = ctx.xbar.T @ sig_inv_x
        prec = np.kron(prec_t, gram) + np.eye(d_cov * n_s) / hyper.sigma_beta_sq
        prior_mean = np.zeros((d_cov, n_s))
        prior_mean[0] = state.lam
        lin = (sig_inv_x.T @ state.L_bar @ prec_t).ravel(order="F")
        lin = lin + prior_mean.ravel(order="F") / hyper.sigma_beta_sq
        z = rng1.standard_normal(lin.size)
        coef = precision_draw_oracle(prec, lin, z).reshape(d_cov, n_s, order="F")

        update_B0_B(state, ctx, rng2)
        assert_allclose(state.beta0_bar, coef[0], rtol=0, atol=1e-8)
        assert_allclose(state.B, coef[1:], rtol=0, atol=1e-8)

    def test_independent_sites_reduce_to_scalar_posterior(self):
        # Four nearly independent sites (tiny kernel length), one species,
        # all biomass values 2 and level 0: the intercept posterior is
        # N(8 / 5, 1 / 5) given unit prior variance.
        hyper = HyperParams(l_Sigma=1e-5)
        ctx, _ = small_survey(
            seed=2, n_sites=4, n_species=1, m_samples=1, k_pcr=1, hyper=hyper
        )
        state = survey_state(ctx, seed=3)
        state.gh = GhState.identity(1)
        state.L_bar[:] = 2.0
        state.lam[:] = 0.0
        rng1, rng2 = rng_pair(3)
        z = rng1.standard_normal(1)
        update_B0_B(state, ctx, rng2)
        assert state.B.shape == (0, 1)
        expected = 8.0 / 5.0 + z[0] / np.sqrt(5.0)
        assert state.beta0_bar[0] == pytest.approx(expected, abs=1e-5)


class TestCollectionSlopes:
    def test_matches_per_species_gaussian_stream(self):
        ctx, _ = small_survey(
            seed=19,
            n_sites=3,
            n_species=2,
            m_samples=2,
            k_pcr=2,
            n_sample_covariates=2,
        )
        state = survey_state(ctx, seed=20)
        state.delta[:, 1] = 0  # exercise the no-data prior branch
        state.gamma[:, 1] = 0
        n_w = ctx.x_w.shape[1]
        hyper = ctx.hyper
        site = ctx.site_of_sample
        rng1, rng2 = rng_pair(9)

        expected = np.empty_like(state.beta_w)
        for s in range(ctx.n_species):
            rows = state.delta[:, s] == 1
            prec = np.eye(n_w) / hyper.sigma_beta_sq
            rhs = np.zeros(n_w)
            if rows.any():
                x = ctx.x_w[rows]
                resid = state.v_bar[rows, s] - state.L_bar[site[rows], s]
                prec = prec + x.T @ x / state.sigma_s_sq[s]
                rhs = x.T @ resid / state.sigma_s_sq[s]
            z = rng1.standard_normal(n_w)
            expected[:, s] = precision_draw_oracle(prec, rhs, z)

        update_beta_w(state, ctx, rng2)
        assert_allclose(state.beta_w, expected, rtol=0, atol=1e-9)

    def test_flat_prior_posterior_mean_is_least_squares(self):
        hyper = HyperParams(sigma_beta_sq=1e10)
        ctx, _ = small_survey(
            seed=23,
            n_sites=4,
            n_species=1,
            m_samples=3,
            k_pcr=1,
            n_sample_covariates=1,
            hyper=hyper,
        )
        state = survey_state(ctx, seed=24)
        state.delta[:] = 1
        state.gamma[:] = 0
        rng = make_rng(0)
        state.v_bar[:, 0] = state.L_bar[ctx.site_of_sample, 0] + (
            0.7 * ctx.x_w[:, 0] + 0.3 * rng.standard_normal(ctx.n_samples)
        )
        x = ctx.x_w
        resid = state.v_bar[:, 0] - state.L_bar[ctx.site_of_sample, 0]
        prec = np.eye(1) / hyper.sigma_beta_sq + x.T @ x / state.sigma_s_sq[0]
        rhs = x.T @ resid / state.sigma_s_sq[0]
        posterior_mean = np.linalg.solve(prec, rhs)
        ols = np.linalg.lstsq(x, resid, rcond=None)[0]
        assert_allclose(posterior_mean, ols, rtol=1e-6)

    def test_without_covariates_consumes_no_randomness(self):
        ctx, _ = small_survey(seed=25, n_sites=2, n_species=1, m_samples=1)
        state = survey_state(ctx, seed=26)
        assert ctx.x_w.shape[1] == 0
        rng1, rng2 = rng_pair(1)
        update_beta_w(state, ctx, rng2)
        assert rng2.standard_normal() == rng1.standard_normal()


class TestSampleNoiseVariance:
    def test_matches_inverse_gamma_stream(self):
        ctx, state = spike_survey(seed=31)
        hyper = ctx.hyper
        site = ctx.site_of_sample
        rng1, rng2 = rng_pair(14)

        expected = np.empty(ctx.n_species)
        for s in range(ctx.n_species):
            rows = state.delta[:, s] == 1
            n_cells = int(rows.sum())
            rss = 0.0
            if n_cells:
                mean = state.L_bar[site[rows], s] + ctx.x_w[rows] @ state.beta_w[:, s]
                rss = float(np.sum((state.v_bar[rows, s] - mean) ** 2))
            shape = hyper.a_sigma + 0.5 * n_cells
            scale = hyper.b_sigma + 0.5 * rss
            expected[s] = scale / rng1.gamma(shape)

        update_sigma_s(state, ctx, rng2)
        assert_allclose(state.sigma_s_sq, expected, rtol=1e-12)

    def test_unit_residuals_give_hand_computed_posterior(self):
        # Four samples with residuals (1, 1, 0, 0): posterior is
        # InvGamma(a + 2, b + 1) = InvGamma(4, 2) at the default (2, 1).
        ctx, _ = small_survey(seed=33, n_sites=2, n_species=1, m_samples=2, k_pcr=1)
        state = survey_state(ctx, seed=34)
        state.delta[:] = 1
        state.gamma[:] = 0
        state.v_bar[:, 0] = state.L_bar[ctx.site_of_sample, 0] + np.array(
            [1.0, 1.0, 0.0, 0.0]
        )
        rng1, rng2 = rng_pair(16)
        expected = 2.0 / rng1.gamma(4.0)
        update_sigma_s(state, ctx, rng2)
        assert state.sigma_s_sq[0] == pytest.approx(expected, rel=1e-12)


class TestContaminationLevel:
    def test_matches_normal_conditional_stream(self):
        ctx, state = spike_survey(seed=41)
        # Force a contaminated cell so the data branch is exercised.
        state.delta[0, 0] = 0
        state.gamma[0, 0] = 1
        state.v_bar[0, 0] = 6.5
        hyper = ctx.hyper
        rng1, rng2 = rng_pair(18)

        prior_prec = 1.0 / hyper.sigma_mu**2
        expected = np.empty(ctx.n_species)
        for s in range(ctx.n_species):
            rows = state.gamma[:, s] == 1
            prec = prior_prec + int(rows.sum()) / state.nu_sq
            mean = (
                prior_prec * state.lam[s]
                + np.sum(state.v_bar[rows, s]) / state.nu_sq
            ) / prec
            expected[s] = mean + rng1.standard_normal() / np.sqrt(prec)

        update_mu_bar(state, ctx, rng2)
        assert_allclose(state.mu_bar, expected, rtol=1e-12)

    def test_flat_prior_reduces_to_sample_mean(self):
        # Three contaminated values (1, 2, 3) under an essentially flat
        # prior: the conditional is close to N(2, 1/3).
        hyper = HyperParams(sigma_mu=1e3)
        ctx, _ = small_survey(
            seed=43, n_sites=3, n_species=1, m_samples=1, k_pcr=1, hyper=hyper
        )
        state = survey_state(ctx, seed=44)
        state.lam[:] = 0.0
        state.delta[:, 0] = 0
        state.gamma[:, 0] = 1
        state.v_bar[:, 0] = np.array([1.0, 2.0, 3.0])
        rng1, rng2 = rng_pair(21)
        z = rng1.standard_normal()
        update_mu_bar(state, ctx, rng2)
        prec = 1e-6 + 3.0
        assert state.mu_bar[0] == pytest.approx(6.0 / prec + z / np.sqrt(prec))
        assert state.mu_bar[0] - z / np.sqrt(prec) == pytest.approx(2.0, abs=1e-5)


class TestPipelineNoiseVariance:
    def test_matches_inverse_gamma_stream(self):
        ctx, state = spike_survey(seed=51)
        hyper = ctx.hyper
        rng1, rng2 = rng_pair(27)
        shape = hyper.a_u + 0.5 * ctx.n_pcr
        scale = hyper.b_u + 0.5 * float(np.sum(state.u**2))
        expected = scale / rng1.gamma(shape)
        update_sigma_u(state, ctx, rng2)
        assert state.sigma_u_sq == pytest.approx(expected, rel=1e-12)

    def test_unit_effects_give_hand_computed_posterior(self):
        # Four PCR rows with effects (1, -1, 0, 0): InvGamma(4, 2).
        ctx, _ = small_survey(seed=53, n_sites=1, n_species=1, m_samples=2, k_pcr=2)
        state = survey_state(ctx, seed=54)
        assert ctx.n_pcr == 4
        state.u[:] = np.array([1.0, -1.0, 0.0, 0.0])
        rng1, rng2 = rng_pair(29)
        expected = 2.0 / rng1.gamma(4.0)
        update_sigma_u(state, ctx, rng2)
        assert state.sigma_u_sq == pytest.approx(expected, rel=1e-14)


class TestOutcomeProbabilities:
    def test_matches_beta_stream_with_recounted_cells(self):
        ctx, state = spike_survey(seed=61)
        hyper = ctx.hyper
        n_s = ctx.n_species
        n_tot_sp = ctx.n_species_total
        j_of_t = ctx.sample_of_pcr
        rng1, rng2 = rng_pair(33)

        # Brute-force recount of every sufficient statistic.
        n_amp = np.zeros(n_tot_sp)
        n_trials = np.zeros(n_tot_sp)
        n_noise = np.zeros(n_s)
        n_off = np.zeros(n_s)
        for s in range(n_s):
            for t in range(ctx.n_pcr):
                j = j_of_t[t]
                if state.delta[j, s] + state.gamma[j, s] > 0:
                    n_trials[s] += 1
                    n_amp[s] += state.c[t, s] == 1
                else:
                    n_off[s] += 1
                    n_noise[s] += state.c[t, s] == 2
        for k in range(ctx.n_spikes):
            n_trials[n_s + k] = ctx.n_pcr
            n_amp[n_s + k] = np.sum(state.c[:, n_s + k] == 1)
        n_gam = np.zeros(n_s)
        n_elig = np.zeros(n_s)
        for s in range(n_s):
            for j in range(ctx.n_samples):
                if ctx.active_mask[j] and state.delta[j, s] == 0:
                    n_elig[s] += 1
                    n_gam[s] += state.gamma[j, s] == 1
        m0 = 0.0
        n00 = 0.0
        for s in range(n_tot_sp):
            for t in range(ctx.n_pcr):
                if state.c[t, s] == 0:
                    m0 += 1
                    n00 += ctx.reads[t, s] == 0

        expected_p = rng1.beta(hyper.a_p + n_amp, hyper.b_p + n_trials - n_amp)
        expected_q = rng1.beta(hyper.a_q + n_noise, hyper.b_q + n_off - n_noise)
        expected_zeta = rng1.beta(
            hyper.a_zeta + n_gam, hyper.b_zeta + n_elig - n_gam
        )
        expected_pi = rng1.beta(hyper.a_pi + n00, hyper.b_pi + m0 - n00)

        update_bernoulli_probs(state, ctx, rng2)
        assert_allclose(state.p, expected_p, rtol=1e-14)
        assert_allclose(state.q, expected_q, rtol=1e-14)
        assert_allclose(state.zeta, expected_zeta, rtol=1e-14)
        assert state.pi == pytest.approx(expected_pi, rel=1e-14)

    def test_five_amplifications_in_ten_trials_beta_25_6(self):
        # One species present in five samples of two replicates each with
        # five amplifications: Beta(20 + 5, 1 + 5) at the default prior.
        ctx, _ = small_survey(seed=63, n_sites=1, n_species=1, m_samples=5, k_pcr=2)
        state = survey_state(ctx, seed=64)
        state.delta[:] = 1
        state.gamma[:] = 0
        state.c[:, 0] = np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
        rng1, rng2 = rng_pair(37)
        expected = rng1.beta(np.array([25.0]), np.array([6.0]))
        update_bernoulli_probs(state, ctx, rng2)
        assert state.p[0] == pytest.approx(expected[0], rel=1e-14)

    def test_without_eligible_cells_draws_from_priors(self):
        ctx, _ = small_survey(seed=65, n_sites=1, n_species=1, m_samples=5, k_pcr=2)
        state = survey_state(ctx, seed=66)
        state.delta[:] = 0
        state.gamma[:] = 0
        state.c[:] = 0
        state.v_bar[:] = np.nan
        state.eta[:] = np.nan
        rng1, rng2 = rng_pair(39)
        expected_p = rng1.beta(np.array([20.0]), np.array([1.0]))
        _ = rng1.beta(np.array([1.0]), np.array([110.0]))
        expected_zeta = rng1.beta(np.array([1.0]), np.array([55.0]))
        update_bernoulli_probs(state, ctx, rng2)
        assert state.p[0] == pytest.approx(expected_p[0], rel=1e-14)
        assert state.zeta[0] == pytest.approx(expected_zeta[0], rel=1e-14)


class TestAmplificationLevels:
    def run_chain(self, ctx, state, n_iter, seed, hyper_free=False):
        config = ChainConfig()
        adapt = AdaptState.create(ctx, config)
        rng = make_rng(seed)
        out = np.empty(n_iter)
        for i in range(n_iter):
            update_lambda(state, ctx, rng, config, adapt)
            out[i] = state.lam[0]
        return out, adapt

    def test_two_normal_factors_give_their_product(self):
        # With no detection term the conditional of the level is the
        # product of N(2, 1) and N(0, 1) densities: N(1, 1/2).
        ctx, _ = small_survey(seed=71, n_sites=2, n_species=1, m_samples=1, k_pcr=1)
        state = survey_state(ctx, seed=72)
        state.beta0_bar = np.array([2.0])
        state.mu_bar = np.array([0.0])
        state.phi1 = np.array([0.0])
        draws, adapt = self.run_chain(ctx, state, 44000, seed=73)
        kept = draws[4000:]
        se = batch_means_se(kept)
        assert kept.mean() == pytest.approx(1.0, abs=4 * se)
        assert kept.var() == pytest.approx(0.5, rel=0.1)
        rate = adapt.acc_lam[0] / 44000
        assert 0.3 < rate < 0.99

    def test_flat_contamination_prior_centres_on_intercept(self):
        hyper = HyperParams(sigma_mu=1e3)
        ctx, _ = small_survey(
            seed=75, n_sites=2, n_species=1, m_samples=1, k_pcr=1, hyper=hyper
        )
        state = survey_state(ctx, seed=76)
        state.beta0_bar = np.array([2.0])
        state.mu_bar = np.array([0.0])
        state.phi1 = np.array([0.0])
        draws, _ = self.run_chain(ctx, state, 44000, seed=77)
        kept = draws[4000:]
        se = batch_means_se(kept)
        assert kept.mean() == pytest.approx(2.0, abs=4 * se)
        assert kept.var() == pytest.approx(1.0, rel=0.1)

    def test_detection_term_matches_quadrature(self):
        ctx, _ = small_survey(seed=79, n_sites=2, n_species=1, m_samples=2, k_pcr=1)
        state = survey_state(ctx, seed=80)
        state.beta0_bar = np.array([7.0])
        state.mu_bar = np.array([7.0])
        state.phi1 = np.array([1.2])
        state.L_bar = np.array([[6.5], [7.5]])
        delta_col = np.zeros(ctx.n_samples, dtype=np.int8)
        delta_col[ctx.site_of_sample == 0] = 1
        delta_col[np.flatnonzero(ctx.site_of_sample == 1)[0]] = 1
        state.delta[:, 0] = delta_col

        lam_grid = np.linspace(0.0, 14.0, 28001)
        psi = 1.2 * (
            state.L_bar[ctx.site_of_sample, 0][:, None] - lam_grid[None, :]
        )
        logp = -((7.0 - lam_grid) ** 2) / 2.0 - ((7.0 - lam_grid) ** 2) / 2.0
        logp = logp + np.sum(
            delta_col[:, None] * psi - np.logaddexp(0.0, psi), axis=0
        )
        w = np.exp(logp - logp.max())
        mean_q = float(np.sum(w * lam_grid) / w.sum())
        var_q = float(np.sum(w * (lam_grid - mean_q) ** 2) / w.sum())

        draws, _ = self.run_chain(ctx, state, 60000, seed=81)
        kept = draws[5000:]
        se = batch_means_se(kept)
        assert kept.mean() == pytest.approx(mean_q, abs=4 * se)
        assert kept.var() == pytest.approx(var_q, rel=0.15)


class TestMarginalSizes:
    def test_without_amplified_cells_targets_truncated_prior(self):
        # No amplified cell leaves the positive-truncated N(100, 100^2)
        # prior: mean 128.76, standard deviation 79.35.
        ctx, _ = small_survey(seed=85, n_sites=2, n_species=1, m_samples=1, k_pcr=1)
        state = survey_state(ctx, seed=86)
        state.c[:] = 0
        state.eta[:] = np.nan
        config = ChainConfig()
        adapt = AdaptState.create(ctx, config)
        rng = make_rng(87)
        n_iter = 50000
        draws = np.empty(n_iter)
        for i in range(n_iter):
            update_r(state, ctx, rng, config, adapt)
            draws[i] = state.r[0]
        kept = draws[5000:]
        se = batch_means_se(kept)
        assert (draws > 0).all()
        assert kept.mean() == pytest.approx(128.759997, abs=4 * se)
        assert kept.std() == pytest.approx(79.352775, rel=0.1)

    def test_negative_binomial_cells_match_quadrature(self):
        settings = SimSettings(n_sites=25, n_species=1, m_samples=2, k_pcr=2)
        dataset, _ = simulate_dataset(settings, 88)
        gen = make_rng(89)
        mu = float(np.exp(5.0))
        r_true = 30.0
        y = gen.negative_binomial(r_true, r_true / (r_true + mu), size=(100, 1))
        dataset = dataclasses.replace(dataset, reads=y.astype(np.int64))
        ctx = build_context(dataset, HyperParams())
        state = survey_state(ctx, seed=90)
        state.delta[:] = 1
        state.gamma[:] = 0
        state.v_bar[:] = 5.0
        state.u[:] = 0.0
        state.c[:] = 1

        from scipy.special import gammaln

        yf = y.astype(float).ravel()
        r_grid = np.linspace(1e-3, 200.0, 40001)
        loglik = np.zeros_like(r_grid)
        for i, r in enumerate(r_grid):
            loglik[i] = float(
                np.sum(
                    gammaln(yf + r)
                    - gammaln(r)
                    + r * (np.log(r) - np.log(r + mu))
                    + yf * (np.log(mu) - np.log(r + mu))
                )
            )
        logp = -((r_grid - 100.0) ** 2) / (2.0 * 100.0**2) + loglik
        w = np.exp(logp - logp.max())
        mean_q = float(np.sum(w * r_grid) / w.sum())
        var_q = float(np.sum(w * (r_grid - mean_q) ** 2) / w.sum())

        config = ChainConfig()
        adapt = AdaptState.create(ctx, config)
        rng = make_rng(91)
        n_iter = 40000
        draws = np.empty(n_iter)
        for i in range(n_iter):
            update_r(state, ctx, rng, config, adapt)
            draws[i] = state.r[0]
        kept = draws[4000:]
        se = batch_means_se(kept)
        assert (draws > 0).all()
        assert kept.mean() == pytest.approx(mean_q, abs=4 * se)
        assert kept.var() == pytest.approx(var_q, rel=0.2)


class TestLatentBiomassScan:
    def test_prior_scan_matches_sequential_conditionals(self):
        ctx, _ = small_survey(seed=95, n_sites=4, n_species=2, m_samples=1, k_pcr=1)
        state = survey_state(ctx, seed=96)
        state.delta[:] = 0
        state.gamma[:] = 0
        state.v_bar[:] = np.nan
        state.c[:] = 0
        state.eta[:] = np.nan
        prec_t = np.array([[1.3, -0.4], [-0.4, 0.8]])
        state.gh = dataclasses.replace(GhState.identity(2), precision=prec_t)
        config = ChainConfig(error_free=True)
        rng1, rng2 = rng_pair(17)

        t_cov = np.linalg.inv(prec_t)
        t_cov = 0.5 * (t_cov + t_cov.T)
        coef = np.vstack([state.beta0_bar[None, :], state.B])
        params = MatrixNormalParams(
            mean=ctx.xbar @ coef, row_cov=ctx.sigma, col_cov=t_cov
        )
        expected = state.L_bar.copy()
        z = rng1.standard_normal((4, 2))
        _ = np.log(rng1.random((4, 2)))
        for s in range(2):
            for i in range(4):
                cm, cv = matnorm_conditional_scalar(i, s, expected, params)
                expected[i, s] = cm + np.sqrt(cv) * z[i, s]

        update_lbar(state, ctx, rng2, config)
        assert_allclose(state.L_bar, expected, rtol=0, atol=1e-8)

    def test_gaussian_data_terms_fold_into_conditional(self):
        ctx, _ = small_survey(seed=97, n_sites=2, n_species=1, m_samples=2, k_pcr=1)
        state = survey_state(ctx, seed=98)
        state.delta[:] = 1
        state.gamma[:] = 0
        state.v_bar[:, 0] = np.array([7.2, 6.9, 7.6, 7.1])
        state.sigma_s_sq = np.array([0.25])
        state.gh = dataclasses.replace(
            GhState.identity(1), precision=np.array([[2.0]])
        )
        config = ChainConfig(error_free=True)
        rng1, rng2 = rng_pair(19)

        t_cov = np.linalg.inv(np.array([[2.0]]))
        t_cov = 0.5 * (t_cov + t_cov.T)
        coef = np.vstack([state.beta0_bar[None, :], state.B])
        params = MatrixNormalParams(
            mean=ctx.xbar @ coef, row_cov=ctx.sigma, col_cov=t_cov
        )
        site = ctx.site_of_sample
        w_data = np.zeros(2)
        lin_data = np.zeros(2)
        for j in range(ctx.n_samples):
            w_data[site[j]] += 1.0 / 0.25
            lin_data[site[j]] += state.v_bar[j, 0] / 0.25

        expected = state.L_bar.copy()
        z = rng1.standard_normal((2, 1))
        _ = np.log(rng1.random((2, 1)))
        for i in range(2):
            cm, cv = matnorm_conditional_scalar(i, 0, expected, params)
            w_quad = 1.0 / cv + w_data[i]
            m_quad = (cm / cv + lin_data[i]) / w_quad
            expected[i, 0] = m_quad + z[i, 0] / np.sqrt(w_quad)

        update_lbar(state, ctx, rng2, config)
        assert_allclose(state.L_bar, expected, rtol=0, atol=1e-8)

    def test_detection_terms_match_two_dimensional_quadrature(self):
        ctx, _ = small_survey(seed=99, n_sites=2, n_species=1, m_samples=1, k_pcr=1)
        state = survey_state(ctx, seed=100)
        sample_at_site0 = int(np.flatnonzero(ctx.site_of_sample == 0)[0])
        sample_at_site1 = int(np.flatnonzero(ctx.site_of_sample == 1)[0])
        state.delta[:] = 0
        state.gamma[:] = 0
        state.delta[sample_at_site0, 0] = 1
        state.v_bar[:] = np.nan
        state.v_bar[sample_at_site0, 0] = 7.3
        state.c[:] = 0
        state.eta[:] = np.nan
        state.sigma_s_sq = np.array([0.25])
        state.phi1 = np.array([0.8])
        state.lam = np.array([7.0])
        state.beta0_bar = np.array([7.0])
        state.gh = dataclasses.replace(
            GhState.identity(1), precision=np.array([[2.0]])
        )
        config = ChainConfig()

        cov_prior = 0.5 * ctx.sigma
        pinv = np.linalg.inv(cov_prior)
        grid = np.linspace(3.0, 11.0, 401)
        l0, l1 = np.meshgrid(grid, grid, indexing="ij")
        d0 = l0 - 7.0
        d1 = l1 - 7.0
        lp = -0.5 * (pinv[0, 0] * d0**2 + 2 * pinv[0, 1] * d0 * d1 + pinv[1, 1] * d1**2)
        lp = lp - (7.3 - l0) ** 2 / (2.0 * 0.25)
        psi0 = 0.8 * (l0 - 7.0)
        psi1 = 0.8 * (l1 - 7.0)
        lp = lp + psi0 - np.logaddexp(0.0, psi0) - np.logaddexp(0.0, psi1)
        w = np.exp(lp - lp.max())
        w = w / w.sum()
        mean0_q = float(np.sum(w * l0))
        mean1_q = float(np.sum(w * l1))
        var0_q = float(np.sum(w * (l0 - mean0_q) ** 2))
        var1_q = float(np.sum(w * (l1 - mean1_q) ** 2))
        cov_q = float(np.sum(w * (l0 - mean0_q) * (l1 - mean1_q)))
        corr_q = cov_q / np.sqrt(var0_q * var1_q)

        rng = make_rng(101)
        n_iter = 50000
        draws = np.empty((n_iter, 2))
        for i in range(n_iter):
            update_lbar(state, ctx, rng, config)
            draws[i, 0] = state.L_bar[0, 0]
            draws[i, 1] = state.L_bar[1, 0]
        kept = draws[5000:]
        se0 = batch_means_se(kept[:, 0])
        se1 = batch_means_se(kept[:, 1])
        assert kept[:, 0].mean() == pytest.approx(mean0_q, abs=4 * se0)
        assert kept[:, 1].mean() == pytest.approx(mean1_q, abs=4 * se1)
        assert kept[:, 0].var() == pytest.approx(var0_q, rel=0.15)
        assert kept[:, 1].var() == pytest.approx(var1_q, rel=0.15)
        corr = float(np.corrcoef(kept.T)[0, 1])
        assert corr == pytest.approx(corr_q, abs=0.06)


class TestSampleFactorBlock:
    def test_without_count_data_targets_the_priors(self):
        ctx, _ = small_survey(seed=105, n_sites=1, n_species=3, m_samples=1, k_pcr=2)
        state = survey_state(ctx, seed=106)
        state.delta[0] = np.array([1, 1, 0])
        state.gamma[0] = np.array([0, 0, 1])
        state.L_bar[0] = np.array([6.2, 7.1, 5.0])
        state.mu_bar = np.array([9.0, 9.0, 6.5])
        state.sigma_s_sq = np.array([0.49, 0.25, 0.81])
        state.sigma_u_sq = 0.36
        state.v_bar[0] = np.array([6.0, 7.0, 6.0])
        state.c[:] = 0
        state.eta[:] = np.nan
        config = ChainConfig()
        rng = make_rng(107)

        n_iter = 6000
        v_draws = np.empty((n_iter, 3))
        u_draws = np.empty((n_iter, 2))
        for i in range(n_iter):
            update_v_u_block(state, ctx, rng, config)
            v_draws[i] = state.v_bar[0]
            u_draws[i] = state.u
        v_kept = v_draws[500:]
        u_kept = u_draws[500:]

        prior_means = [6.2, 7.1, 6.5]
        prior_vars = [0.49, 0.25, state.nu_sq]
        for s in range(3):
            se = batch_means_se(v_kept[:, s])
            assert v_kept[:, s].mean() == pytest.approx(prior_means[s], abs=4 * se)
            assert v_kept[:, s].var() == pytest.approx(prior_vars[s], rel=0.15)
        for k in range(2):
            se = batch_means_se(u_kept[:, k])
            assert u_kept[:, k].mean() == pytest.approx(0.0, abs=4 * se)
            assert u_kept[:, k].var() == pytest.approx(0.36, rel=0.15)
        assert abs(np.corrcoef(v_kept[:, 0], u_kept[:, 0])[0, 1]) < 0.06
        assert abs(np.corrcoef(v_kept[:, 0], v_kept[:, 1])[0, 1]) < 0.06

    def test_joint_conditional_matches_two_dimensional_quadrature(self):
        ctx, _ = small_survey(seed=109, n_sites=1, n_species=1, m_samples=1, k_pcr=1)
        state = survey_state(ctx, seed=110)
        state.delta[0, 0] = 1
        state.gamma[0, 0] = 0
        state.L_bar[0, 0] = 5.0
        state.sigma_s_sq = np.array([0.25])
        state.sigma_u_sq = 0.36
        state.v_bar[0, 0] = 5.0
        state.u[0] = 0.0
        state.c[0, 0] = 1
        state.eta[0, 0] = 130.0
        state.r = np.array([50.0])
        config = ChainConfig()

        v_grid = np.linspace(2.5, 7.5, 701)
        u_grid = np.linspace(-2.4, 2.4, 701)
        vv, uu = np.meshgrid(v_grid, u_grid, indexing="ij")
        total = vv + uu
        lp = (
            -0.5 * (vv - 5.0) ** 2 / 0.25
            - 0.5 * uu**2 / 0.36
            - 50.0 * total
            - 50.0 * 130.0 * np.exp(-total)
        )
        w = np.exp(lp - lp.max())
        w = w / w.sum()
        mean_v = float(np.sum(w * vv))
        mean_u = float(np.sum(w * uu))
        var_v = float(np.sum(w * (vv - mean_v) ** 2))
        var_u = float(np.sum(w * (uu - mean_u) ** 2))
        corr_vu = float(
            np.sum(w * (vv - mean_v) * (uu - mean_u)) / np.sqrt(var_v * var_u)
        )

        rng = make_rng(111)
        n_iter = 60000
        draws = np.empty((n_iter, 2))
        for i in range(n_iter):
            update_v_u_block(state, ctx, rng, config)
            draws[i, 0] = state.v_bar[0, 0]
            draws[i, 1] = state.u[0]
        kept = draws[5000:]
        se_v = batch_means_se(kept[:, 0])
        se_u = batch_means_se(kept[:, 1])
        assert kept[:, 0].mean() == pytest.approx(mean_v, abs=4 * se_v)
        assert kept[:, 1].mean() == pytest.approx(mean_u, abs=4 * se_u)
        assert kept[:, 0].var() == pytest.approx(var_v, rel=0.2)
        assert kept[:, 1].var() == pytest.approx(var_u, rel=0.2)
        assert np.corrcoef(kept.T)[0, 1] == pytest.approx(corr_vu, abs=0.06)

    def test_factor_move_improves_pipeline_mean_mixing(self):
        settings = SimSettings(n_sites=1, n_species=4, m_samples=1, k_pcr=8)
        dataset, _ = simulate_dataset(settings, 113)
        gen = make_rng(114)
        v_true = np.array([5.0, 5.5, 4.5, 5.2])
        u_true = 0.4 * gen.standard_normal(8)
        y = gen.poisson(np.exp(v_true[None, :] + u_true[:, None]))
        dataset = dataclasses.replace(dataset, reads=y.astype(np.int64))
        ctx = build_context(dataset, HyperParams())

        def fresh_state():
            state = survey_state(ctx, seed=115)
            state.delta[:] = 1
            state.gamma[:] = 0
            state.v_bar[0] = v_true.copy()
            state.u[:] = u_true.copy()
            state.L_bar[0] = v_true.copy()
            state.c[:] = 1
            state.sigma_s_sq = np.full(4, 0.25)
            state.sigma_u_sq = 0.25
            state.r = np.full(4, 200.0)
            return state

        def run(factor_step):
            state = fresh_state()
            config = ChainConfig(factor_step=factor_step)
            rng = make_rng(116)
            n_iter = 4000
            out = np.empty(n_iter)
            for i in range(n_iter):
                update_eta(state, ctx, rng)
                update_v_u_block(state, ctx, rng, config)
                out[i] = state.u.mean()
            return out[500:]

        ess_with = float(effective_sample_size(run(True)))
        ess_without = float(effective_sample_size(run(False)))
        assert ess_with >= 2.0 * ess_without


class TestDetectionCoefficients:
    def test_without_active_samples_draws_from_prior(self):
        ctx, state = spike_survey(seed=121)
        ctx_off = dataclasses.replace(
            ctx,
            active_mask=np.zeros(ctx.n_samples, dtype=bool),
            nc_mask=np.ones(ctx.n_samples, dtype=bool),
        )
        hyper = ctx.hyper
        n_w = ctx.x_w.shape[1]
        rng1, rng2 = rng_pair(47)
        expected_phi1 = rng1.standard_normal(ctx.n_species) * np.sqrt(
            hyper.sigma_phi_sq
        )
        expected_phi = rng1.standard_normal((n_w, ctx.n_species)) * np.sqrt(
            hyper.sigma_phi_sq
        )
        update_phi(state, ctx_off, rng2, ChainConfig())
        assert_allclose(state.phi1, expected_phi1, rtol=1e-14)
        assert_allclose(state.phi, expected_phi, rtol=1e-14)

    def test_matches_augmented_gaussian_stream(self):
        ctx, state = spike_survey(seed=123)
        hyper = ctx.hyper
        n_w = ctx.x_w.shape[1]
        rng1, rng2 = rng_pair(49)

        rows = ctx.active_mask
        x_rows = ctx.x_w[rows]
        l_rows = state.L_bar[ctx.site_of_sample][rows]
        psi = np.clip(
            state.phi1[None, :] * (l_rows - state.lam[None, :])
            + x_rows @ state.phi,
            -30.0,
            30.0,
        )
        omega = kernels.pg_draws(psi.ravel(), rng1).reshape(psi.shape)
        kappa = state.delta[rows].astype(float) - 0.5
        expected_phi1 = np.empty(ctx.n_species)
        expected_phi = np.empty((n_w, ctx.n_species))
        for s in range(ctx.n_species):
            design = np.hstack([(l_rows[:, s] - state.lam[s])[:, None], x_rows])
            prec = design.T @ (design * omega[:, s][:, None])
            prec = prec + np.eye(1 + n_w) / hyper.sigma_phi_sq
            rhs = design.T @ kappa[:, s]
            z = rng1.standard_normal(1 + n_w)
            draw = precision_draw_oracle(prec, rhs, z)
            expected_phi1[s] = draw[0]
            expected_phi[:, s] = draw[1:]

        update_phi(state, ctx, rng2, ChainConfig())
        assert_allclose(state.phi1, expected_phi1, rtol=0, atol=1e-9)
        assert_allclose(state.phi, expected_phi, rtol=0, atol=1e-9)
        assert (state.omega[rows] > 0).all()

    def test_recovers_logistic_coefficients(self):
        ctx, _ = small_survey(
            seed=125,
            n_sites=240,
            n_species=1,
            m_samples=2,
            k_pcr=1,
            n_sample_covariates=1,
        )
        state = survey_state(ctx, seed=126)
        gen = make_rng(127)
        state.L_bar[:, 0] = 7.0 + 0.8 * gen.standard_normal(ctx.n_sites)
        state.lam = np.array([7.0])
        phi1_true, phi_true = 1.0, 0.7
        psi = phi1_true * (state.L_bar[ctx.site_of_sample, 0] - 7.0)
        psi = psi + phi_true * ctx.x_w[:, 0]
        state.delta[:, 0] = (
            gen.random(ctx.n_samples) < 1.0 / (1.0 + np.exp(-psi))
        ).astype(np.int8)
        state.gamma[:] = 0

        rng = make_rng(128)
        n_iter = 2500
        draws = np.empty((n_iter, 2))
        for i in range(n_iter):
            update_phi(state, ctx, rng, ChainConfig())
            draws[i, 0] = state.phi1[0]
            draws[i, 1] = state.phi[0, 0]
        kept = draws[500:]
        for col, truth in ((0, phi1_true), (1, phi_true)):
            sd = kept[:, col].std()
            assert abs(kept[:, col].mean() - truth) < 3.5 * sd
        assert (state.omega[ctx.active_mask] > 0).all()


class TestNoiseReadParams:
    def run_chain(self, ctx, state, n_iter, seed):
        config = ChainConfig()
        adapt = AdaptState.create(ctx, config)
        rng = make_rng(seed)
        out = np.empty((n_iter, 3))
        for i in range(n_iter):
            update_noise_params(state, ctx, rng, config, adapt)
            out[i] = (state.mu_tilde, state.mu0, state.n0)
        return out

    def test_without_noise_cells_targets_exponential_priors(self):
        ctx, _ = small_survey(seed=131, n_sites=2, n_species=1, m_samples=1, k_pcr=2)
        state = survey_state(ctx, seed=132)
        state.delta[:] = 1
        state.gamma[:] = 0
        state.c[:] = 1
        draws = self.run_chain(ctx, state, 60000, seed=133)
        kept = draws[5000:]
        assert (draws > 0).all()
        # Exponential rates 0.01 and 0.1: means 100, 10, 10.
        for col, mean in ((0, 100.0), (1, 10.0), (2, 10.0)):
            se = batch_means_se(kept[:, col])
            assert kept[:, col].mean() == pytest.approx(mean, abs=4 * se)
            assert kept[:, col].std() == pytest.approx(mean, rel=0.25)

    def test_noise_cells_give_gamma_posterior_for_mean(self):
        settings = SimSettings(n_sites=15, n_species=1, m_samples=2, k_pcr=2)
        dataset, _ = simulate_dataset(settings, 135)
        gen = make_rng(136)
        y = gen.poisson(35.0, size=(60, 1))
        dataset = dataclasses.replace(dataset, reads=y.astype(np.int64))
        ctx = build_context(dataset, HyperParams())
        state = survey_state(ctx, seed=137)
        state.delta[:] = 0
        state.gamma[:] = 1
        state.v_bar[:] = state.mu_bar[None, :]
        state.c[:] = 2
        state.eta[:] = np.nan
        state.mu_tilde = 35.0

        total = float(y.sum())
        shape = total + 1.0
        rate = 60.0 + 0.01
        draws = self.run_chain(ctx, state, 40000, seed=138)
        kept = draws[4000:, 0]
        se = batch_means_se(kept)
        assert kept.mean() == pytest.approx(shape / rate, abs=4 * se)
        assert kept.var() == pytest.approx(shape / rate**2, rel=0.2)

    def test_shifted_trace_reads_match_quadrature(self):
        settings = SimSettings(n_sites=20, n_species=1, m_samples=2, k_pcr=2)
        dataset, _ = simulate_dataset(settings, 141)
        gen = make_rng(142)
        mu0_true, n0_true = 4.0, 6.0
        y = 1 + gen.negative_binomial(
            n0_true, n0_true / (n0_true + mu0_true), size=(80, 1)
        )
        dataset = dataclasses.replace(dataset, reads=y.astype(np.int64))
        ctx = build_context(dataset, HyperParams())
        state = survey_state(ctx, seed=143)
        state.delta[:] = 0
        state.gamma[:] = 0
        state.v_bar[:] = np.nan
        state.c[:] = 0
        state.eta[:] = np.nan

        from scipy.special import gammaln

        shifted = y.astype(float).ravel() - 1.0
        mu_grid = np.linspace(0.05, 15.0, 400)
        n_grid = np.linspace(0.05, 60.0, 500)
        mm, nn = np.meshgrid(mu_grid, n_grid, indexing="ij")
        lp = -0.1 * mm - 0.1 * nn
        for val, count in zip(*np.unique(shifted, return_counts=True)):
            lp = lp + count * (
                gammaln(val + nn)
                - gammaln(nn)
                - gammaln(val + 1.0)
                + nn * (np.log(nn) - np.log(nn + mm))
                + val * (np.log(mm) - np.log(nn + mm))
            )
        w = np.exp(lp - lp.max())
        w = w / w.sum()
        mean_mu = float(np.sum(w * mm))
        mean_n = float(np.sum(w * nn))

        draws = self.run_chain(ctx, state, 50000, seed=144)
        kept = draws[5000:]
        assert (draws[:, 1:] > 0).all()
        se_mu = batch_means_se(kept[:, 1])
        se_n = batch_means_se(kept[:, 2])
        assert kept[:, 1].mean() == pytest.approx(mean_mu, abs=4 * se_mu)
        assert kept[:, 2].mean() == pytest.approx(mean_n, abs=4 * se_n)
