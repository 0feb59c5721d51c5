"""
Coupled stochastic-statistical closure model (the filter's forecast step).

N fluctuation particles Z follow

    dZ = [L(u) Z + Gamma(Z Z^T - R)] dt + Sigma dW

while the mean u and covariance R obey explicit equations fed by empirical
averages over the particles, plus the relaxation eps^{-1}(E[ZZ^T] - R).
Feedbacks are always evaluated at the start of a step.
"""

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from parallel import map_particles
from rng import ParticleStreams, antithetic_gaussian, gaussian_samples
from spectral_model import (
    SpectralSystem,
    StatState,
    SymQuadForms,
    ensure_finite,
    fluct_operator,
    mean_drift,
    obs_cov_fn,
    obs_mean_fn,
    project_psd,
    quad_coupling,
    symmetrize,
)

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1.0


@dataclass(frozen=True, eq=False)
class Ensemble:
    particles: np.ndarray
    streams: ParticleStreams

    def __post_init__(self):
        particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if particles.shape[0] < 2:
            raise ValueError(f"An ensemble needs at least 2 particles, got {particles.shape[0]}")
        object.__setattr__(self, "particles", particles)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def d(self) -> int:
        return self.particles.shape[1]

    def with_particles(self, particles: np.ndarray) -> "Ensemble":
        return Ensemble(particles=particles, streams=self.streams)


@dataclass(frozen=True, eq=False)
class ClosureState:
    ens: Ensemble
    stats: StatState
    t: float
    eps: float = DEFAULT_EPS
    step: int = 0
    psd_projections: int = 0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


class Feedbacks(NamedTuple):
    qm: np.ndarray
    qv: np.ndarray
    zz: np.ndarray


def ensemble_feedbacks(forms: SymQuadForms, ens: Ensemble) -> Feedbacks:
    """Empirical averages E^N[H^m(Z)], E^N[H^v(Z)], E^N[ZZ^T]"""
    z = ens.particles
    qm = obs_mean_fn(forms, z).mean(axis=0)
    qv = symmetrize(obs_cov_fn(forms, z).mean(axis=0))
    zz = symmetrize(np.einsum("ni,nj->ij", z, z) / ens.n)
    return Feedbacks(qm, qv, zz)


def init_closure_state(init: StatState, n: int, seed: int, eps: float = DEFAULT_EPS,
                       antithetic: bool = True) -> ClosureState:
    """
    Ensemble of fluctuations Z ~ N(0, R0) with statistics (u0, R0).

    Antithetic pairs make E^N[Z0] = 0 exactly.
    """
    streams = ParticleStreams(seed)
    zero = np.zeros(init.d)
    if antithetic:
        particles = antithetic_gaussian(zero, init.cov, n, streams)
    else:
        particles = gaussian_samples(zero, init.cov, n, streams)
    return ClosureState(ens=Ensemble(particles, streams), stats=init, t=0.0, eps=eps)


def fluctuation_drift(sys: SpectralSystem, lop: np.ndarray, z: np.ndarray, ref_cov: np.ndarray) -> np.ndarray:
    """L Z + Gamma(Z Z^T - R) row by row"""
    zzt = np.einsum("ni,nj->nij", z, z)
    return np.einsum("kl,nl->nk", lop, z) + quad_coupling(sys, zzt - ref_cov)


def model_kick(sys: SpectralSystem, st: ClosureState, tau: float) -> np.ndarray:
    """Sigma_t sqrt(tau) xi for every particle, from the model noise channel"""
    sigma = sys.noise(st.t)
    xi = st.ens.streams.normals("model", st.step, (st.ens.n, sys.s))
    return np.sqrt(tau) * np.einsum("ks,ns->nk", sigma, xi)


def advance_stats(sys: SpectralSystem, st: ClosureState, fb: Feedbacks, tau: float,
                  relax: bool = True):
    """Explicit Euler step of the mean and covariance equations; returns (stats, projected)"""
    ubar, cov = st.stats.mean, st.stats.cov
    lop = fluct_operator(sys, ubar)
    new_mean = ubar + (mean_drift(sys, ubar, st.t) + fb.qm) * tau

    rhs = lop @ cov + cov @ lop.T + fb.qv + sys.noise_cov(st.t)
    if relax:
        rhs = rhs + (fb.zz - cov) / st.eps
    new_cov, projected = project_psd(symmetrize(cov + rhs * tau))
    return StatState(new_mean, new_cov), projected


def forecast_step(sys: SpectralSystem, forms: SymQuadForms, st: ClosureState, tau: float,
                  workers: int = 1) -> ClosureState:
    """One fully explicit Euler-Maruyama step of the coupled closure model"""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")

    fb = ensemble_feedbacks(forms, st.ens)
    lop = fluct_operator(sys, st.stats.mean)
    kick = model_kick(sys, st, tau)
    z = st.ens.particles
    cov = st.stats.cov

    def advance(rows: slice) -> np.ndarray:
        return z[rows] + fluctuation_drift(sys, lop, z[rows], cov) * tau + kick[rows]

    particles = map_particles(advance, st.ens.n, workers)
    t_next = st.t + tau
    ensure_finite(particles, t_next, "ensemble")

    stats, projected = advance_stats(sys, st, fb, tau)
    ensure_finite(np.concatenate([stats.mean, stats.cov.ravel()]), t_next, "statistics")
    if projected:
        logger.debug(f"PSD projection at t={t_next:.6g}")

    return replace(
        st,
        ens=st.ens.with_particles(particles),
        stats=stats,
        t=t_next,
        step=st.step + 1,
        psd_projections=st.psd_projections + int(projected),
    )


def forecast_step_first_order(sys: SpectralSystem, forms: SymQuadForms, st: ClosureState, tau: float,
                              workers: int = 1) -> ClosureState:
    """
    First-order closure: only the mean is evolved; the particle equation
    uses E^N[ZZ^T] in place of R. The reported covariance is E^N[ZZ^T] of
    the updated ensemble.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")

    fb = ensemble_feedbacks(forms, st.ens)
    lop = fluct_operator(sys, st.stats.mean)
    kick = model_kick(sys, st, tau)
    z = st.ens.particles

    def advance(rows: slice) -> np.ndarray:
        return z[rows] + fluctuation_drift(sys, lop, z[rows], fb.zz) * tau + kick[rows]

    particles = map_particles(advance, st.ens.n, workers)
    t_next = st.t + tau
    ensure_finite(particles, t_next, "ensemble")

    ubar = st.stats.mean
    new_mean = ubar + (mean_drift(sys, ubar, st.t) + fb.qm) * tau
    ensure_finite(new_mean, t_next, "mean")
    ens = st.ens.with_particles(particles)
    zz = symmetrize(np.einsum("ni,nj->ij", particles, particles) / ens.n)

    return replace(st, ens=ens, stats=StatState(new_mean, zz), t=t_next, step=st.step + 1)


def consistency_errors(st: ClosureState):
    """(|E^N[Z]|_inf, ||E^N[ZZ^T] - R||_F) for the statistical-consistency check"""
    z = st.ens.particles
    zz = np.einsum("ni,nj->ij", z, z) / st.ens.n
    return float(np.abs(z.mean(axis=0)).max()), float(np.linalg.norm(zz - st.stats.cov))
