import math
import unittest

import numpy as np
from numpy.testing import assert_allclose

from errors import CflViolationError, NegativeDensityError
from experiments import builtin_system
from fp_oracle import (
    Grid1D,
    GridCovKernel,
    GridDensity,
    density_snapshot,
    fp_dt_max,
    fp_matrix,
    fp_step,
    grid_moments,
    kb_filter_step,
    ks_analysis_step,
    observation_profiles,
    riccati_reference,
    run_oracle,
    velocity,
)
from obs_stream import ObservationSeries
from spectral_model import StatState, SymQuadForms

OU_STATS = StatState([0.0], [[1.0]])


def constant_obs(mean=0.0, var=1.0, n_obs=3, delta=0.5, gamma=1.0):
    return ObservationSeries(delta=delta, values=np.tile([mean, var], (n_obs, 1)), d=1,
                             gamma_m=gamma, gamma_v=gamma)


class TestGrid(unittest.TestCase):
    def test_geometry(self):
        grid = Grid1D(-1.0, 1.0, 40)
        self.assertAlmostEqual(grid.h, 0.05)
        self.assertEqual(grid.edges.size, 41)
        assert_allclose(grid.centers[[0, -1]], [-0.975, 0.975])
        around = Grid1D.around(0.5, m=64, width=8.0)
        self.assertEqual((around.z_min, around.z_max), (-4.0, 4.0))

    def test_validation(self):
        with self.assertRaises(ValueError):
            Grid1D(-1.0, 1.0, 16)
        with self.assertRaises(ValueError):
            Grid1D(1.0, 1.0, 64)

    def test_density(self):
        grid = Grid1D.around(1.0, m=256)
        rho = GridDensity.gaussian(grid, 0.0, 1.0)
        self.assertAlmostEqual(rho.mass, 1.0, places=12)
        self.assertLess(rho.boundary_mass(), 1e-12)
        doubled = GridDensity(grid, 2.0 * rho.rho)
        self.assertAlmostEqual(doubled.normalized().mass, 1.0, places=12)
        with self.assertRaises(ValueError):
            GridDensity(grid, -np.ones(256))

    def test_gaussian_moments(self):
        grid = Grid1D.around(0.5, m=256)
        rho = GridDensity.gaussian(grid, 0.3, 0.25)
        mom = grid_moments(rho, SymQuadForms.from_gamma(np.zeros((1, 1, 1))))
        self.assertAlmostEqual(mom.mean, 0.3, places=8)
        self.assertAlmostEqual(mom.var, 0.25, places=8)

    def test_kernel_from_density(self):
        grid = Grid1D.around(1.0, m=128)
        rho = GridDensity.gaussian(grid, 0.0, 1.0)
        kernel = GridCovKernel.from_density(rho)
        assert_allclose(kernel.apply(np.ones(128)), 0.0, atol=1e-12)
        z = grid.centers
        var = grid.h * (z ** 2) @ rho.rho
        self.assertAlmostEqual(kernel.quadratic_form(z), var, places=10)
        assert_allclose(GridCovKernel.zeros(grid).c, 0.0)


class TestForecastSolver(unittest.TestCase):
    def setUp(self):
        self.sys = builtin_system("ou1")
        self.forms = SymQuadForms.from_system(self.sys)
        self.grid = Grid1D.around(1.0, m=128)

    def test_velocity(self):
        assert_allclose(velocity(self.sys, OU_STATS, np.array([-1.0, 2.0])), [1.0, -2.0])

    def test_generator_structure(self):
        cubic = builtin_system("cubic1")
        a = fp_matrix(cubic, StatState([0.3], [[0.5]]), self.grid, 0.0)
        assert_allclose(a.sum(axis=0), 0.0, atol=1e-9)
        off = a - np.diag(np.diag(a))
        self.assertGreaterEqual(off.min(), 0.0)
        self.assertAlmostEqual(fp_dt_max(a), 1.0 / np.max(-np.diag(a)))
        with self.assertRaises(ValueError):
            fp_matrix(builtin_system("triad3"), StatState(np.zeros(3), np.eye(3)), self.grid, 0.0)

    def test_step_conserves_mass_and_symmetry(self):
        rho = GridDensity.gaussian(self.grid, 0.0, 0.25)
        for _ in range(50):
            rho = fp_step(self.sys, self.forms, rho, OU_STATS, 0.004)
        self.assertAlmostEqual(rho.mass, 1.0, places=10)
        self.assertGreaterEqual(rho.rho.min(), 0.0)
        self.assertAlmostEqual(grid_moments(rho, self.forms).mean, 0.0, places=10)

    def test_ou_variance(self):
        rho = GridDensity.gaussian(self.grid, 0.0, 0.25)
        for _ in range(250):
            rho = fp_step(self.sys, self.forms, rho, OU_STATS, 0.004)
        expected = 1.0 + (0.25 - 1.0) * math.exp(-2.0)
        self.assertAlmostEqual(grid_moments(rho, self.forms).var, expected, delta=0.1)

    def test_cfl_violation(self):
        rho = GridDensity.gaussian(self.grid, 0.0, 0.25)
        with self.assertRaises(CflViolationError) as ctx:
            fp_step(self.sys, self.forms, rho, OU_STATS, 1.0)
        self.assertLess(ctx.exception.dt_max, 1.0)


class TestFilterSolvers(unittest.TestCase):
    def setUp(self):
        self.sys = builtin_system("cubic1")
        self.forms = SymQuadForms.from_system(self.sys)
        self.grid = Grid1D.around(0.5, m=32)
        self.rho = GridDensity.gaussian(self.grid, 0.0, 0.25)
        self.stats = StatState([0.0], [[0.25]])

    def test_kb_without_observations_is_forecast(self):
        kernel = GridCovKernel.from_density(self.rho)
        rho_kb, kernel_kb = kb_filter_step(self.rho, kernel, self.stats, np.zeros(2), self.sys, self.forms,
                                           0.001, np.inf, np.inf)
        rho_fp = fp_step(self.sys, self.forms, self.rho, self.stats, 0.001)
        assert_allclose(rho_kb.rho, rho_fp.rho, rtol=1e-12, atol=1e-15)
        self.assertAlmostEqual(rho_kb.mass, 1.0, places=10)
        self.assertLess(kernel_kb.asymmetry, 1e-10)

    def test_kb_preserves_mass_with_observations(self):
        kernel = GridCovKernel.from_density(self.rho)
        rho, _ = kb_filter_step(self.rho, kernel, self.stats, np.array([0.1, -0.2]), self.sys, self.forms,
                                0.001, 0.5, 0.5)
        self.assertAlmostEqual(float(rho.rho.sum() * self.grid.h), 1.0, places=8)

    def test_riccati_decay_of_observed_variance(self):
        hm, _ = observation_profiles(self.forms, self.grid)
        kernel = GridCovKernel.from_density(self.rho)
        q0 = kernel.quadratic_form(hm)
        rho = self.rho
        dt, gamma = 0.01, 0.1
        for _ in range(200):
            rho, kernel = kb_filter_step(rho, kernel, self.stats, np.zeros(2), self.sys, self.forms,
                                         dt, gamma, np.inf, analysis_only=True)
        expected = riccati_reference(q0, 1.0, gamma, 200 * dt)
        self.assertAlmostEqual(kernel.quadratic_form(hm) / expected, 1.0, delta=0.02)

    def test_riccati_guard(self):
        kernel = GridCovKernel.from_density(self.rho)
        with self.assertRaises(CflViolationError):
            kb_filter_step(self.rho, kernel, self.stats, np.zeros(2), self.sys, self.forms, 0.001, 1e-4, np.inf)

    def test_kb_analysis_only_skips_generator(self):
        kernel = GridCovKernel.from_density(self.rho)
        with self.assertRaises(CflViolationError):
            kb_filter_step(self.rho, kernel, self.stats, np.zeros(2), self.sys, self.forms, 0.5, np.inf, np.inf)
        rho, kernel_after = kb_filter_step(self.rho, kernel, self.stats, np.zeros(2), self.sys, self.forms,
                                           0.5, np.inf, np.inf, analysis_only=True)
        assert_allclose(rho.rho, self.rho.rho, rtol=0, atol=0)
        assert_allclose(kernel_after.c, kernel.c, rtol=0, atol=1e-15)
        self.assertEqual(rho.clipped, 0)

    def test_kb_counts_clipped_cells(self):
        kernel = GridCovKernel.from_density(self.rho)
        rho, _ = kb_filter_step(self.rho, kernel, self.stats, np.array([-100.0, 0.0]), self.sys, self.forms,
                                0.01, 1.0, np.inf, analysis_only=True)
        self.assertGreater(rho.clipped, 0)
        self.assertTrue(np.all(rho.rho >= 0.0))
        self.assertGreater(rho.mass, 1.0)

    def test_ks_reweighting(self):
        before = grid_moments(self.rho, self.forms)
        slope = np.array([before.hm_mean + 1.0, before.hv_mean])
        after_rho = ks_analysis_step(self.rho, slope, self.forms, StatState([0.0], [[0.0]]), 0.01, self.sys,
                                     0.5, np.inf)
        self.assertAlmostEqual(after_rho.mass, 1.0, places=12)
        self.assertGreater(grid_moments(after_rho, self.forms).hm_mean, before.hm_mean)

    def test_ks_without_observations_changes_nothing(self):
        rho = ks_analysis_step(self.rho, np.array([5.0, 5.0]), self.forms, self.stats, 0.01, self.sys,
                               np.inf, np.inf)
        assert_allclose(rho.rho, self.rho.rho, rtol=1e-12)

    def test_ks_negative_density(self):
        with self.assertRaises(NegativeDensityError):
            ks_analysis_step(self.rho, np.array([-100.0, 0.0]), self.forms, self.stats, 10.0, self.sys,
                             0.1, np.inf)


class TestRunOracle(unittest.TestCase):
    def setUp(self):
        self.sys = builtin_system("ou1")
        self.forms = SymQuadForms.from_system(self.sys)
        self.rho = GridDensity.gaussian(Grid1D.around(1.0, m=64), 0.0, 0.25)

    def test_modes(self):
        for mode in ("fp", "ks", "kb"):
            run = run_oracle(self.sys, self.forms, constant_obs(), self.rho, 0.01, 20, mode=mode,
                             snapshot_every=10)
            self.assertEqual(len(run.records), 21)
            assert_allclose(run.times, 0.01 * np.arange(21), atol=1e-15)
            self.assertEqual(len(run.snapshots), 2)
            self.assertAlmostEqual(run.records[-1].mass, 1.0, places=8)
            self.assertEqual(run.kernel is not None, mode == "kb")

    def test_rejects_bad_input(self):
        with self.assertRaises(ValueError):
            run_oracle(self.sys, self.forms, constant_obs(), self.rho, 0.01, 5, mode="enkf")
        obs2 = ObservationSeries(delta=0.5, values=np.zeros((2, 6)), d=2, gamma_m=1.0, gamma_v=1.0)
        with self.assertRaises(ValueError):
            run_oracle(self.sys, self.forms, obs2, self.rho, 0.01, 5)

    def test_failure_reports_step(self):
        with self.assertRaises(CflViolationError) as ctx:
            run_oracle(self.sys, self.forms, constant_obs(), self.rho, 0.5, 2, mode="fp")
        self.assertEqual(ctx.exception.step_index, 0)

    def test_clipped_cells_are_reported(self):
        sys = builtin_system("cubic1")
        forms = SymQuadForms.from_system(sys)
        rho = GridDensity.gaussian(Grid1D.around(0.5, m=32), 0.0, 0.25)
        falling = ObservationSeries(delta=0.01, values=[[0.0, 0.25], [-1.0, 0.25], [-2.0, 0.25]], d=1,
                                    gamma_m=1.0, gamma_v=np.inf)
        with self.assertLogs("fp_oracle", level="WARNING") as logs:
            run = run_oracle(sys, forms, falling, rho, 0.01, 2, mode="kb", analysis_only=True)
        counts = [rec.clipped for rec in run.records]
        self.assertEqual(counts[0], 0)
        self.assertGreater(counts[1], 0)
        self.assertGreaterEqual(counts[2], counts[1])
        self.assertTrue(any("clipped" in line for line in logs.output))

    def test_clean_run_clips_nothing(self):
        run = run_oracle(self.sys, self.forms, constant_obs(), self.rho, 0.01, 20, mode="kb")
        self.assertEqual(run.records[-1].clipped, 0)

    def test_snapshot_record(self):
        record = density_snapshot(self.rho, 0.5, with_centers=True)
        self.assertEqual(len(record["rho"]), 64)
        self.assertEqual(len(record["z_centers"]), 64)
        self.assertEqual(record["t"], 0.5)


class TestRiccatiReference(unittest.TestCase):
    def test_values(self):
        assert_allclose(riccati_reference(2.0, 1.0, 1.0, [0.0, 1.0]), [2.0, 2.0 / 3.0])


if __name__ == "__main__":
    unittest.main()
