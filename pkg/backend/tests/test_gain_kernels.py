import unittest

import numpy as np
from numpy.testing import assert_allclose

from gain_kernels import (
    GainContext,
    drift,
    gain_cov,
    gain_cov_jacobian,
    gain_divergence,
    gain_mean,
    gain_mean_jacobian,
    gain_moment_check,
    weighted_gains,
)
from spectral_model import (
    SymQuadForms,
    obs_cov_fn,
    obs_cov_jacobian,
    obs_mean_fn,
    obs_mean_jacobian,
    random_system,
)


def central_jacobian(fn, z, step=1e-5):
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = step
        cols.append((fn(z + e) - fn(z - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def random_context(d, seed, variant="euler_consistent", gamma_m=0.5, gamma_v=0.7):
    rng = np.random.default_rng(seed)
    forms = SymQuadForms.from_system(random_system(d, rng))
    hbar_m = rng.standard_normal(d)
    hbar_v = rng.standard_normal((d, d))
    return GainContext(forms, hbar_m, hbar_v + hbar_v.T, gamma_m, gamma_v, variant), rng


class TestGainContext(unittest.TestCase):
    def test_validation(self):
        forms = SymQuadForms.from_gamma(np.ones((1, 1, 1)))
        with self.assertRaises(ValueError):
            GainContext(forms, [0.0], [[0.0]], 0.0, 1.0)
        with self.assertRaises(ValueError):
            GainContext(forms, [0.0], [[0.0]], 1.0, -1.0)
        with self.assertRaises(ValueError):
            GainContext(forms, [0.0], [[0.0]], 1.0, 1.0, variant="exact")

    def test_weights(self):
        forms = SymQuadForms.from_gamma(np.ones((2, 2, 2)))
        ctx = GainContext(forms, np.zeros(2), np.zeros((2, 2)), [0.5, 2.0], np.inf)
        assert_allclose(ctx.weights_m, [4.0, 0.25])
        assert_allclose(ctx.weights_v, np.zeros(4))


class TestScalarGains(unittest.TestCase):
    def setUp(self):
        forms = SymQuadForms.from_gamma(np.ones((1, 1, 1)))
        self.ctx = GainContext(forms, [0.0], [[0.0]], 0.5, 1.0)

    def test_closed_forms(self):
        # H^m = z^2, H^v = 2 z^3
        z = np.array([2.0])
        assert_allclose(gain_mean(self.ctx, z), [[4.0]])
        assert_allclose(gain_cov(self.ctx, z), [[2.0 / 3.0 * 16.0]])

    def test_scalar_drift(self):
        z = np.array([1.5])
        # 3/4 W_m z^5 + 16/9 W_v z^7
        expected = 0.75 * 4.0 * 1.5 ** 5 + 16.0 / 9.0 * 1.5 ** 7
        assert_allclose(drift(self.ctx, z), [expected], rtol=1e-12)


class TestJacobiansAndDrift(unittest.TestCase):
    def test_jacobians_match_finite_differences(self):
        for variant in ("euler_consistent", "printed"):
            for d in (1, 2, 3):
                ctx, rng = random_context(d, d, variant)
                z = rng.standard_normal(d)
                assert_allclose(gain_mean_jacobian(ctx, z),
                                central_jacobian(lambda x: gain_mean(ctx, x), z), rtol=1e-6, atol=1e-8)
                assert_allclose(gain_cov_jacobian(ctx, z),
                                central_jacobian(lambda x: gain_cov(ctx, x), z), rtol=1e-6, atol=1e-8)

    def test_divergence_is_jacobian_trace(self):
        for variant in ("euler_consistent", "printed"):
            ctx, rng = random_context(3, 11, variant)
            z = rng.standard_normal(3)
            div_m, div_v = gain_divergence(ctx, z)
            assert_allclose(div_m, np.einsum("jaj->a", gain_mean_jacobian(ctx, z)), rtol=1e-10, atol=1e-12)
            assert_allclose(div_v.ravel(), np.einsum("jaj->a", gain_cov_jacobian(ctx, z)), rtol=1e-10, atol=1e-12)

    def test_drift_matches_loops(self):
        ctx, rng = random_context(2, 4)
        z = rng.standard_normal(2)
        km, kv = gain_mean(ctx, z), gain_cov(ctx, z)
        jm, jv = gain_mean_jacobian(ctx, z), gain_cov_jacobian(ctx, z)
        expected = np.zeros(2)
        for i in range(2):
            for j in range(2):
                for a in range(2):
                    expected[i] += ctx.weights_m[a] * km[j, a] * jm[i, a, j]
                for a in range(4):
                    expected[i] += ctx.weights_v[a] * kv[j, a] * jv[i, a, j]
        assert_allclose(drift(ctx, z), expected, rtol=1e-12)

    def test_batched(self):
        ctx, rng = random_context(3, 5)
        z = rng.standard_normal((6, 3))
        batch = drift(ctx, z)
        for i in range(6):
            assert_allclose(batch[i], drift(ctx, z[i]), rtol=1e-12)

    def test_infinite_noise_switches_gains_off(self):
        ctx, rng = random_context(2, 6, gamma_m=np.inf, gamma_v=np.inf)
        z = rng.standard_normal((4, 2))
        assert_allclose(drift(ctx, z), 0.0)
        km, kv = weighted_gains(ctx, z)
        assert_allclose(km, 0.0)
        assert_allclose(kv, 0.0)

    def test_variants_agree_without_reference(self):
        ctx, rng = random_context(2, 7)
        a = GainContext(ctx.forms, ctx.hbar_m, np.zeros((2, 2)), 0.5, 0.7, "euler_consistent")
        b = GainContext(ctx.forms, ctx.hbar_m, np.zeros((2, 2)), 0.5, 0.7, "printed")
        z = rng.standard_normal(2)
        assert_allclose(gain_cov(a, z), gain_cov(b, z))
        assert_allclose(drift(a, z), drift(b, z))


def pointwise_products(ctx, z):
    """(sum_j K~_{j,a} dH_b/dz_j, (H_a - Hbar_a) H_b) for both channels at a single point"""
    d = ctx.d
    hm = obs_mean_fn(ctx.forms, z)
    hv = obs_cov_fn(ctx.forms, z).ravel()
    dhm = obs_mean_jacobian(ctx.forms, z)
    dhv = obs_cov_jacobian(ctx.forms, z).reshape(d * d, d)
    mean = (np.einsum("ja,bj->ab", gain_mean(ctx, z), dhm), np.outer(hm - ctx.hbar_m, hm))
    cov = (np.einsum("ja,bj->ab", gain_cov(ctx, z), dhv), np.outer(hv - ctx.hbar_v.ravel(), hv))
    return mean, cov


def unreduced_drift(ctx, z, step=1e-5):
    """div(K Gamma^2 K^T) - K Gamma^2 div(K^T) by central differences, K = K~ Gamma^-2"""
    total = np.zeros(ctx.d)
    for gain_fn, w in ((gain_mean, ctx.weights_m), (gain_cov, ctx.weights_v)):
        outer = central_jacobian(lambda x: np.einsum("ia,a,ka->ik", gain_fn(ctx, x), w, gain_fn(ctx, x)), z, step)
        div_k = np.einsum("jaj->a", central_jacobian(lambda x: gain_fn(ctx, x), z, step))
        total += np.einsum("ikk->i", outer) - gain_fn(ctx, z) @ (w * div_k)
    return total


class TestPointwiseIdentities(unittest.TestCase):
    def test_gain_factorizes_observation_gradient(self):
        for d in (1, 2, 3, 4):
            for seed in range(10):
                ctx, rng = random_context(d, 100 * d + seed)
                for z in rng.standard_normal((5, d)):
                    for lhs, rhs in pointwise_products(ctx, z):
                        scale = max(1.0, np.abs(rhs).max())
                        assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * scale)

    def test_printed_variant_breaks_factorization(self):
        ctx, rng = random_context(2, 21, "printed")
        z = rng.standard_normal(2)
        (lhs_m, rhs_m), (lhs_v, rhs_v) = pointwise_products(ctx, z)
        assert_allclose(lhs_m, rhs_m, rtol=1e-12, atol=1e-12)
        self.assertGreater(np.abs(lhs_v - rhs_v).max(), 1e-3)

    def test_drift_matches_unreduced_form(self):
        for d in (1, 2, 3, 4):
            ctx, rng = random_context(d, 40 + d)
            for z in rng.standard_normal((50, d)):
                expected = unreduced_drift(ctx, z)
                got = drift(ctx, z)
                err = np.linalg.norm(got - expected)
                self.assertLess(err, 1e-5 * max(np.linalg.norm(got), 1e-3), (d, z))


class TestGainCondition(unittest.TestCase):
    def test_ensemble_gain_condition_holds(self):
        rng = np.random.default_rng(8)
        for d in (1, 2, 3):
            forms = SymQuadForms.from_system(random_system(d, rng))
            z = rng.standard_normal((200, d))
            ctx = GainContext.from_particles(forms, z, 0.5, 0.5)
            (lhs_m, rhs_m), (lhs_v, rhs_v) = gain_moment_check(ctx, z)
            scale_m = np.abs(rhs_m).max()
            scale_v = np.abs(rhs_v).max()
            assert_allclose(lhs_m, rhs_m, rtol=1e-9, atol=1e-11 * scale_m)
            assert_allclose(lhs_v, rhs_v, rtol=1e-9, atol=1e-11 * scale_v)


if __name__ == "__main__":
    unittest.main()
