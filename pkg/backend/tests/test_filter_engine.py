import math
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from closure_forecast import init_closure_state
from errors import ObsExhaustedError
from experiments import builtin_system
from filter_engine import (
    FilterConfig,
    analysis_increment,
    filter_step,
    forecast_run,
    make_record,
    run_filter,
    stats_of,
)
from gain_kernels import GainContext
from obs_stream import ObservationSeries
from spectral_model import SpectralSystem, StatState, SymQuadForms, TimeProfile


def constant_obs(n_obs=3, delta=0.05, gamma=0.5, mean=0.0, var=0.25):
    values = np.tile([mean, var], (n_obs, 1))
    return ObservationSeries(delta=delta, values=values, d=1, gamma_m=gamma, gamma_v=gamma)


def config(**overrides):
    params = {"tau": 0.01, "delta": 0.05, "N": 64, "T": 0.1, "seed": 0}
    params.update(overrides)
    return FilterConfig(**params)


class TestFilterConfig(unittest.TestCase):
    def test_delta_multiple_of_tau(self):
        with self.assertRaises(ValidationError):
            config(delta=0.025)
        self.assertEqual(config().n_steps, 10)

    def test_rejects_unknown_variant_and_bad_values(self):
        with self.assertRaises(ValidationError):
            config(gain_variant="exact")
        with self.assertRaises(ValidationError):
            config(N=1)
        with self.assertRaises(ValidationError):
            config(tau=0.0)


class TestAnalysisIncrement(unittest.TestCase):
    def setUp(self):
        self.sys = SpectralSystem(lam=[[0.0]], gamma=np.ones((1, 1, 1)), forcing=TimeProfile.zeros((1,)),
                                  noise=TimeProfile.zeros((1, 1)))
        forms = SymQuadForms.from_system(self.sys)
        self.ctx = GainContext(forms, [0.0], [[0.0]], 1.0, 1.0)

    def increment(self, **noise):
        return analysis_increment(self.ctx, np.array([1.0]), np.zeros(1), np.zeros((1, 1)), np.zeros(2),
                                  self.sys, 0.01, 0.0, **noise)

    def test_scalar_closed_form(self):
        # drift 3/4 + 16/9, innovations -1/2 and -4/3, all per unit tau
        assert_allclose(self.increment(), [0.01 * 25.0 / 36.0], rtol=1e-12)

    def test_observation_noise_term(self):
        base = self.increment()
        perturbed = self.increment(noise_m=np.array([2.0]))
        assert_allclose(perturbed - base, [-math.sqrt(0.01)], rtol=1e-12)

    def test_infinite_amplitude_gives_no_increment(self):
        ctx = GainContext(self.ctx.forms, [0.0], [[0.0]], np.inf, np.inf)
        inc = analysis_increment(ctx, np.array([[1.0], [-0.5]]), np.ones(1), np.ones((1, 1)), np.zeros(2),
                                 self.sys, 0.01, 0.0, noise_m=np.ones((2, 1)), noise_v=np.ones((2, 1, 1)))
        assert_array_equal(inc, np.zeros((2, 1)))


class TestFilterRun(unittest.TestCase):
    def setUp(self):
        self.sys = builtin_system("cubic1")
        self.forms = SymQuadForms.from_system(self.sys)
        self.init = init_closure_state(StatState([0.0], [[0.25]]), 64, seed=3)

    def test_infinite_noise_matches_forecast(self):
        cfg = config()
        filtered = run_filter(self.sys, self.forms, constant_obs(gamma=np.inf), cfg, self.init)
        forecast = forecast_run(self.sys, self.forms, cfg, self.init)
        assert_allclose(filtered.final.ens.particles, forecast.final.ens.particles, rtol=1e-12, atol=1e-14)
        assert_allclose(filtered.means(), forecast.means(), rtol=1e-12, atol=1e-14)
        assert_allclose(filtered.covs(), forecast.covs(), rtol=1e-12, atol=1e-14)

    def test_large_noise_approaches_forecast(self):
        cfg = config()
        forecast = forecast_run(self.sys, self.forms, cfg, self.init)
        ref = np.concatenate([forecast.final.ens.particles.ravel(), forecast.means().ravel(), forecast.covs().ravel()])
        gaps = []
        for gamma in (1e2, 1e4, 1e8):
            run = run_filter(self.sys, self.forms, constant_obs(gamma=gamma), cfg, self.init)
            got = np.concatenate([run.final.ens.particles.ravel(), run.means().ravel(), run.covs().ravel()])
            gaps.append(np.abs(got - ref).max() / np.abs(ref).max())
        self.assertGreater(gaps[0], gaps[1])
        self.assertGreater(gaps[1], gaps[2])
        self.assertLess(gaps[2], 1e-6)

    def test_records_every_step(self):
        run = run_filter(self.sys, self.forms, constant_obs(), config(), self.init)
        self.assertEqual(len(run.records), 11)
        assert_allclose(run.times, 0.01 * np.arange(11), atol=1e-15)
        rec = run.records[-1]
        self.assertEqual(rec.c_h.shape, (1, 1))
        self.assertGreaterEqual(rec.hm_spread, 0.0)
        self.assertEqual(stats_of(rec).d, 1)

    def test_observations_exhausted(self):
        with self.assertRaises(ObsExhaustedError) as ctx:
            run_filter(self.sys, self.forms, constant_obs(n_obs=2), config(), self.init)
        self.assertEqual(ctx.exception.step_index, 5)

    def test_reproducible_and_worker_independent(self):
        obs = constant_obs()
        a = run_filter(self.sys, self.forms, obs, config(), self.init)
        b = run_filter(self.sys, self.forms, obs, config(), self.init)
        c = run_filter(self.sys, self.forms, obs, config(workers=4), self.init)
        assert_array_equal(a.final.ens.particles, b.final.ens.particles)
        assert_array_equal(a.final.ens.particles, c.final.ens.particles)
        assert_array_equal(a.means(), c.means())

    def test_analysis_only_keeps_statistics(self):
        state = filter_step(self.sys, self.forms, self.init, constant_obs(), config(analysis_only=True))
        assert_array_equal(state.stats.mean, self.init.stats.mean)
        assert_array_equal(state.stats.cov, self.init.stats.cov)
        self.assertFalse(np.array_equal(state.ens.particles, self.init.ens.particles))
        self.assertAlmostEqual(state.t, 0.01)

    def test_split_step_differs_from_combined_step(self):
        obs = constant_obs(mean=0.5, var=0.5)
        combined = filter_step(self.sys, self.forms, self.init, obs, config())
        split = filter_step(self.sys, self.forms, self.init, obs, config(split_step=True))
        assert_array_equal(combined.stats.mean, split.stats.mean)
        self.assertFalse(np.array_equal(combined.ens.particles, split.ens.particles))

    def test_make_record_spread(self):
        rec = make_record(self.forms, self.init)
        z = self.init.ens.particles[:, 0]
        hm = 0.25 * z ** 2
        self.assertAlmostEqual(rec.hm_spread, float(np.std(hm)), places=12)
        assert_allclose(rec.hbar_m, [hm.mean()], rtol=1e-12)


if __name__ == "__main__":
    unittest.main()
