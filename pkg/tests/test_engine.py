"""Chain driver behaviour: determinism, state invariants, proposal modes,
the error-free variant, and the location identities of the read likelihood."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.special import gammaln

from dnabiomass import (
    ChainConfig,
    SimSettings,
    run_chain,
    simulate_dataset,
)
from dnabiomass.engine import Sampler, joint_log_density, uncentred_loglik


def full_survey_dataset(seed=31):
    """Survey with spike-ins, a negative control, and both covariate kinds."""
    settings = SimSettings(
        n_sites=3,
        n_species=2,
        m_samples=2,
        k_pcr=2,
        n_spikes=1,
        n_negative_controls=1,
        n_site_covariates=1,
        n_sample_covariates=1,
    )
    dataset, _ = simulate_dataset(settings, seed)
    return dataset


class TestDeterminism:
    def test_same_seed_gives_identical_draws(self):
        dataset = full_survey_dataset()
        config = ChainConfig(n_iter=60, n_burnin=20, thin=2, seed=42)
        first = run_chain(dataset, config=config)
        second = run_chain(dataset, config=config)
        assert first.samples.keys() == second.samples.keys()
        for name in first.samples:
            assert np.array_equal(
                first.samples[name], second.samples[name]
            ), name
        assert np.array_equal(first.iterations, second.iterations)
        assert first.meta["clamp_events"] == second.meta["clamp_events"]

    def test_thinning_bookkeeping(self):
        dataset = full_survey_dataset()
        config = ChainConfig(n_iter=60, n_burnin=20, thin=2, seed=42)
        draws = run_chain(dataset, config=config)
        assert draws.n_draws == 20
        assert draws.iterations[0] == 22
        assert draws.iterations[-1] == 60
        assert np.all(np.diff(draws.iterations) == 2)
        for name, mat in draws.samples.items():
            assert mat.shape == (20, len(draws.columns[name])), name
            assert np.isfinite(mat).all(), name

    def test_different_seeds_differ(self):
        dataset = full_survey_dataset()
        a = run_chain(
            dataset, config=ChainConfig(n_iter=30, n_burnin=10, seed=1)
        )
        b = run_chain(
            dataset, config=ChainConfig(n_iter=30, n_burnin=10, seed=2)
        )
        assert not np.array_equal(
            a.samples["beta0_bar"], b.samples["beta0_bar"]
        )


class TestStructuralInvariants:
    def test_state_remains_consistent_across_sweeps(self):
        dataset = full_survey_dataset(seed=33)
        sampler = Sampler(
            dataset, config=ChainConfig(n_iter=100, n_burnin=50, seed=7)
        )
        ctx = sampler.ctx
        n_s = ctx.n_species
        spike_v_before = ctx.spike_v.copy()
        for sweep in range(30):
            sampler.sweep()
            state = sampler.state
            assert np.isin(state.delta, (0, 1)).all()
            assert np.isin(state.gamma, (0, 1)).all()
            assert np.isin(state.c, (0, 1, 2)).all()
            # contamination only where the occupancy indicator is off
            assert not np.any((state.gamma == 1) & (state.delta == 1))
            # negative controls never occupied or contaminated
            assert not state.delta[ctx.nc_mask].any()
            assert not state.gamma[ctx.nc_mask].any()
            # latent quantities exist exactly for switched-on cells
            active = (state.delta + state.gamma) > 0
            assert np.array_equal(np.isfinite(state.v_bar), active)
            # Poisson-Gamma latents exist exactly for amplified cells
            assert np.array_equal(np.isfinite(state.eta), state.c == 1)
            # target outcomes agree with the sample-level switches
            active_cell = active[ctx.sample_of_pcr]
            tgt = state.c[:, :n_s]
            assert np.all(active_cell[tgt == 1])
            assert not np.any(active_cell[tgt == 2])
            # spike-in outcomes are amplified-or-dropout only
            assert np.isin(state.c[:, n_s:], (0, 1)).all()
            if (sweep + 1) % 5 == 0:
                assert np.isfinite(joint_log_density(state, ctx))
        assert np.array_equal(ctx.spike_v, spike_v_before)


class TestIndicatorModes:
    def deep_dataset(self):
        settings = SimSettings(
            n_sites=2, n_species=2, m_samples=1, k_pcr=13
        )
        dataset, _ = simulate_dataset(settings, 55)
        return dataset

    def test_adaptive_rejects_deep_replication(self):
        with pytest.raises(
            ValueError, match="at most 12 PCR replicates per sample"
        ):
            Sampler(
                self.deep_dataset(),
                config=ChainConfig(indicator_mode="adaptive"),
            )

    def test_auto_falls_back_to_gibbs_when_deep(self):
        sampler = Sampler(
            self.deep_dataset(),
            config=ChainConfig(
                n_iter=8, n_burnin=2, indicator_mode="auto", seed=3
            ),
        )
        assert sampler.adapt.indicator_counts is None
        for _ in range(8):
            sampler.sweep()
        assert not sampler._indicator_adaptive_now()

    def test_auto_allocates_counts_for_shallow_designs(self):
        dataset = full_survey_dataset()
        sampler = Sampler(
            dataset, config=ChainConfig(indicator_mode="auto")
        )
        counts = sampler.adapt.indicator_counts
        ctx = sampler.ctx
        assert counts is not None
        assert counts.shape == (ctx.n_samples, ctx.n_species, 3 * 2**2)
        assert np.array_equal(
            sampler.adapt.n_codes_per_sample, 3 * 2**ctx.k_per_sample
        )

    def test_gibbs_mode_never_adapts(self):
        dataset = full_survey_dataset()
        sampler = Sampler(
            dataset,
            config=ChainConfig(
                n_iter=8, n_burnin=2, indicator_mode="gibbs", seed=3
            ),
        )
        assert sampler.adapt.indicator_counts is None
        for _ in range(8):
            sampler.sweep()
        assert not sampler._indicator_adaptive_now()


class TestErrorFree:
    def test_indicators_stay_clamped(self):
        dataset = full_survey_dataset(seed=35)
        config = ChainConfig(
            n_iter=40, n_burnin=20, seed=9, error_free=True
        )
        sampler = Sampler(dataset, config=config)
        ctx = sampler.ctx
        n_s = ctx.n_species
        phi_before = sampler.state.phi.copy()
        for _ in range(12):
            sampler.sweep()
            state = sampler.state
            expected_delta = np.ones((ctx.n_samples, n_s), dtype=np.int8)
            expected_delta[ctx.nc_mask] = 0
            assert np.array_equal(state.delta, expected_delta)
            assert not state.gamma.any()
            nc_rows = ctx.nc_mask[ctx.sample_of_pcr]
            assert np.all(state.c[~nc_rows] == 1)
            assert np.all(state.c[nc_rows, :n_s] == 0)
            assert np.all(state.c[nc_rows, n_s:] == 1)
            assert np.isfinite(state.v_bar[~ctx.nc_mask]).all()
        # detection coefficients and outcome probabilities are not updated
        assert np.array_equal(sampler.state.phi, phi_before)
        assert np.allclose(sampler.state.p, 1.0 - 1e-12)


class TestJointDensityGuards:
    def test_missing_latents_give_minus_inf(self):
        dataset = full_survey_dataset(seed=37)
        sampler = Sampler(
            dataset, config=ChainConfig(n_iter=20, n_burnin=10, seed=5)
        )
        for _ in range(5):
            sampler.sweep()
        state, ctx = sampler.state, sampler.ctx
        base = joint_log_density(state, ctx)
        assert np.isfinite(base)

        c1_cells = np.argwhere(state.c == 1)
        t, s = c1_cells[0]
        saved = state.eta[t, s]
        state.eta[t, s] = np.nan
        assert joint_log_density(state, ctx) == -np.inf
        state.eta[t, s] = saved

        active = np.argwhere((state.delta + state.gamma) > 0)
        j, s = active[0]
        saved = state.v_bar[j, s]
        state.v_bar[j, s] = np.nan
        assert joint_log_density(state, ctx) == -np.inf
        state.v_bar[j, s] = saved
        assert joint_log_density(state, ctx) == pytest.approx(base)

    def test_nonpositive_size_gives_minus_inf(self):
        dataset = full_survey_dataset(seed=37)
        sampler = Sampler(
            dataset, config=ChainConfig(n_iter=20, n_burnin=10, seed=5)
        )
        sampler.sweep()
        sampler.state.r[0] = -1.0
        assert joint_log_density(sampler.state, sampler.ctx) == -np.inf


def random_uncentred_inputs(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    n_sites, per_site, k, n_s, n_w = 4, 2, 2, 3, 2
    n_samples = n_sites * per_site
    n_pcr = n_samples * k
    site_of_sample = np.repeat(np.arange(n_sites), per_site)
    sample_of_pcr = np.repeat(np.arange(n_samples), k)
    reads = rng.poisson(3.0, (n_pcr, n_s)).astype(float)
    return dict(
        reads=reads,
        log_y_fact=gammaln(reads + 1.0),
        c_codes=rng.integers(0, 3, (n_pcr, n_s)),
        delta=rng.integers(0, 2, (n_samples, n_s)),
        sample_of_pcr=sample_of_pcr,
        site_of_sample=site_of_sample,
        x_w=rng.standard_normal((n_samples, n_w)),
        beta0=rng.standard_normal(n_s),
        l_tilde=rng.standard_normal((n_sites, n_s)),
        v_tilde=rng.standard_normal((n_samples, n_s)),
        collection_rate=rng.standard_normal(n_s),
        lam=rng.standard_normal(n_s),
        u=rng.standard_normal(n_pcr),
        r=rng.lognormal(2.0, 0.3, n_s),
        phi0=rng.standard_normal(n_s),
        phi1=rng.standard_normal(n_s),
        phi=rng.standard_normal((n_w, n_s)),
        beta_w=rng.standard_normal((n_w, n_s)),
    )


class TestUncentredLoglik:
    def test_location_shifts_cancel(self):
        # adding c + d to the biomass intercept while removing c from the
        # amplification level, d from the collection rate, and
        # phi1 * (c + d) from the detection intercept leaves the read and
        # detection likelihood unchanged
        for seed in range(5):
            args = random_uncentred_inputs(100 + seed)
            base = uncentred_loglik(**args)
            c_shift, d_shift = 0.7, -1.3
            shifted = dict(args)
            shifted["beta0"] = args["beta0"] + c_shift + d_shift
            shifted["lam"] = args["lam"] - c_shift
            shifted["collection_rate"] = (
                args["collection_rate"] - d_shift
            )
            shifted["phi0"] = args["phi0"] - args["phi1"] * (
                c_shift + d_shift
            )
            moved = uncentred_loglik(**shifted)
            assert abs(moved - base) <= 1e-10 * max(1.0, abs(base))

    def test_uncompensated_shift_changes_value(self):
        args = random_uncentred_inputs(200)
        base = uncentred_loglik(**args)
        bumped = dict(args)
        bumped["beta0"] = args["beta0"] + 0.5
        assert uncentred_loglik(**bumped) != pytest.approx(base)
        bumped = dict(args)
        bumped["phi0"] = args["phi0"] + 0.5
        assert uncentred_loglik(**bumped) != pytest.approx(base)
