"""
Explicit polynomial gains for the analysis step.

    K~m_{j,k}(z)  = 1/2 z_j [H^m_k(z) - Hbar^m_k]
    K~v_{j,kl}(z) = 1/3 z_j [H^v_kl(z) - Hbar^v_kl]          (euler_consistent)
    K~v_{j,kl}(z) = 1/3 z_j H^v_kl(z) - 1/3 Hbar^v_kl         (printed)

Full gains are K = K~ Gamma^{-2}. Because H^m and H^v are homogeneous of
degree 2 and 3, sum_j K~_{j,a} dH_b/dz_j = (H_a - Hbar_a) H_b pointwise for the
euler_consistent form. The drift

    a = sum over channels of div(K Gamma^2 K^T) - K Gamma^2 div(K^T)

reduces to a_i = sum_a W_a sum_j K~_{j,a} d_j K~_{i,a} with W = Gamma^{-2}.
Every function accepts a leading batch axis on z.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from spectral_model import (
    SymQuadForms,
    obs_cov_fn,
    obs_cov_jacobian,
    obs_mean_fn,
    obs_mean_jacobian,
    symmetrize,
)

logger = logging.getLogger(__name__)

GAIN_VARIANTS = ("euler_consistent", "printed")


@dataclass(frozen=True, eq=False)
class GainContext:
    forms: SymQuadForms
    hbar_m: np.ndarray
    hbar_v: np.ndarray
    gamma_m: np.ndarray
    gamma_v: np.ndarray
    variant: str = "euler_consistent"

    def __post_init__(self):
        d = self.forms.d
        gm = np.broadcast_to(np.asarray(self.gamma_m, dtype=float), (d,)).copy()
        gv = np.broadcast_to(np.asarray(self.gamma_v, dtype=float), (d, d)).copy()
        if not (np.all(gm > 0) and np.all(gv > 0)):
            raise ValueError("Observation noise amplitudes must be strictly positive")
        if self.variant not in GAIN_VARIANTS:
            raise ValueError(f"Unknown gain variant '{self.variant}'. Allowed: {', '.join(GAIN_VARIANTS)}")
        object.__setattr__(self, "gamma_m", gm)
        object.__setattr__(self, "gamma_v", gv)
        object.__setattr__(self, "hbar_m", np.asarray(self.hbar_m, dtype=float).reshape(d))
        object.__setattr__(self, "hbar_v", symmetrize(np.asarray(self.hbar_v, dtype=float).reshape(d, d)))

    @classmethod
    def from_particles(cls, forms: SymQuadForms, particles: np.ndarray, gamma_m, gamma_v,
                       variant: str = "euler_consistent") -> "GainContext":
        """Gain context with Hbar computed as ensemble averages"""
        hbar_m = obs_mean_fn(forms, particles).mean(axis=0)
        hbar_v = obs_cov_fn(forms, particles).mean(axis=0)
        return cls(forms, hbar_m, hbar_v, gamma_m, gamma_v, variant)

    @property
    def d(self) -> int:
        return self.forms.d

    @property
    def weights_m(self) -> np.ndarray:
        return self.gamma_m ** -2.0

    @property
    def weights_v(self) -> np.ndarray:
        return (self.gamma_v ** -2.0).ravel()


def gain_mean(ctx: GainContext, z: np.ndarray) -> np.ndarray:
    """K~m(z) with shape (..., d, d); rows j, columns k"""
    z = np.asarray(z, dtype=float)
    g = obs_mean_fn(ctx.forms, z) - ctx.hbar_m
    return 0.5 * z[..., :, None] * g[..., None, :]


def gain_cov(ctx: GainContext, z: np.ndarray) -> np.ndarray:
    """K~v(z) with shape (..., d, d*d); columns are (k, l) row-major"""
    z = np.asarray(z, dtype=float)
    hv = obs_cov_fn(ctx.forms, z)
    flat = hv.reshape(hv.shape[:-2] + (-1,))
    hbar = ctx.hbar_v.ravel()
    if ctx.variant == "printed":
        return (z[..., :, None] * flat[..., None, :] - hbar) / 3.0
    return z[..., :, None] * (flat - hbar)[..., None, :] / 3.0


def gain_mean_jacobian(ctx: GainContext, z: np.ndarray) -> np.ndarray:
    """J[..., j, k, i] = d K~m_{j,k} / d z_i"""
    z = np.asarray(z, dtype=float)
    d = ctx.d
    g = obs_mean_fn(ctx.forms, z) - ctx.hbar_m
    dh = obs_mean_jacobian(ctx.forms, z)  # (..., k, i)
    eye = np.eye(d)
    return 0.5 * (eye[:, None, :] * g[..., None, :, None] + z[..., :, None, None] * dh[..., None, :, :])


def gain_cov_jacobian(ctx: GainContext, z: np.ndarray) -> np.ndarray:
    """J[..., j, (k,l), i] = d K~v_{j,kl} / d z_i"""
    z = np.asarray(z, dtype=float)
    d = ctx.d
    hv = obs_cov_fn(ctx.forms, z)
    dh = obs_cov_jacobian(ctx.forms, z)
    flat = hv.reshape(hv.shape[:-2] + (d * d,))
    dflat = dh.reshape(dh.shape[:-3] + (d * d, d))
    coeff = flat if ctx.variant == "printed" else flat - ctx.hbar_v.ravel()
    eye = np.eye(d)
    return (eye[:, None, :] * coeff[..., None, :, None] + z[..., :, None, None] * dflat[..., None, :, :]) / 3.0


def gain_divergence(ctx: GainContext, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Column divergences div(K~^T)_a = sum_j d_j K~_{j,a} in closed form:
    mean channel 1/2 [d (H^m - Hbar^m) + 2 H^m], covariance channel
    1/3 [d (H^v - Hbar^v) + 3 H^v] (printed form: 1/3 [d H^v + 3 H^v]).
    """
    z = np.asarray(z, dtype=float)
    d = ctx.d
    hm = obs_mean_fn(ctx.forms, z)
    hv = obs_cov_fn(ctx.forms, z)
    div_m = 0.5 * (d * (hm - ctx.hbar_m) + 2.0 * hm)
    coeff = hv if ctx.variant == "printed" else hv - ctx.hbar_v
    div_v = (d * coeff + 3.0 * hv) / 3.0
    return div_m, div_v


def _channel_drift(gain: np.ndarray, jac: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # a_i = sum_a W_a sum_j K_{j,a} dK_{i,a}/dz_j
    return np.einsum("a,...ja,...iaj->...i", weights, gain, jac)


def drift(ctx: GainContext, z: np.ndarray) -> np.ndarray:
    """Analysis drift a(z), both observation channels summed"""
    z = np.asarray(z, dtype=float)
    a_m = _channel_drift(gain_mean(ctx, z), gain_mean_jacobian(ctx, z), ctx.weights_m)
    a_v = _channel_drift(gain_cov(ctx, z), gain_cov_jacobian(ctx, z), ctx.weights_v)
    return a_m + a_v


def weighted_gains(ctx: GainContext, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Full gains K^m = K~m Gamma_m^{-2}, K^v = K~v Gamma_v^{-2}"""
    return gain_mean(ctx, z) * ctx.weights_m, gain_cov(ctx, z) * ctx.weights_v


def gain_moment_check(ctx: GainContext, z: np.ndarray):
    """
    Ensemble form of the gain condition for both channels.

    Returns ((lhs_m, rhs_m), (lhs_v, rhs_v)) with lhs = E^N[K~^T grad H] and
    rhs = empirical covariance of H about ctx.hbar.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n, d = z.shape
    hm = obs_mean_fn(ctx.forms, z)
    hv = obs_cov_fn(ctx.forms, z).reshape(n, d * d)
    dhm = obs_mean_jacobian(ctx.forms, z)
    dhv = obs_cov_jacobian(ctx.forms, z).reshape(n, d * d, d)

    lhs_m = np.einsum("nja,nbj->ab", gain_mean(ctx, z), dhm) / n
    lhs_v = np.einsum("nja,nbj->ab", gain_cov(ctx, z), dhv) / n
    gm = hm - ctx.hbar_m
    gv = hv - ctx.hbar_v.ravel()
    rhs_m = np.einsum("na,nb->ab", gm, hm - hm.mean(axis=0)) / n
    rhs_v = np.einsum("na,nb->ab", gv, hv - hv.mean(axis=0)) / n
    return (lhs_m, rhs_m), (lhs_v, rhs_v)
