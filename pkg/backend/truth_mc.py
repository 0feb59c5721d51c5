"""
Monte-Carlo simulation of the full quadratic system with a large particle
cloud. Produces reference statistics and the raw mean/covariance paths that
observations are synthesized from.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from parallel import map_particles
from rng import ParticleStreams, gaussian_samples
from spectral_model import (
    SpectralSystem,
    StatState,
    SymQuadForms,
    ensure_finite,
    obs_cov_fn,
    obs_mean_fn,
    quadratic_term,
    symmetrize,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TruthCloud:
    particles: np.ndarray
    t: float
    streams: ParticleStreams
    step: int = 0

    def __post_init__(self):
        particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if particles.shape[0] < 2:
            raise ValueError(f"A truth cloud needs at least 2 particles, got {particles.shape[0]}")
        object.__setattr__(self, "particles", particles)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def d(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True, eq=False)
class HigherMoments:
    tensor: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray  # excess kurtosis


def init_truth_cloud(init: StatState, n: int, seed: int) -> TruthCloud:
    """Gaussian N(mean, cov) initial cloud"""
    streams = ParticleStreams(seed)
    particles = gaussian_samples(init.mean, init.cov, n, streams)
    return TruthCloud(particles=particles, t=0.0, streams=streams)


def step_truth(sys: SpectralSystem, cloud: TruthCloud, dt: float, workers: int = 1) -> TruthCloud:
    """One Euler-Maruyama step of the original system for every particle"""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")

    t = cloud.t
    forcing = sys.forcing(t)
    sigma = sys.noise(t)
    xi = cloud.streams.normals("model", cloud.step, (cloud.n, sys.s))
    sqrt_dt = np.sqrt(dt)

    def advance(rows: slice) -> np.ndarray:
        u = cloud.particles[rows]
        drift = np.einsum("kp,np->nk", sys.lam, u) + quadratic_term(sys.gamma, u) + forcing
        kick = np.einsum("ks,ns->nk", sigma, xi[rows])
        return u + drift * dt + sqrt_dt * kick

    particles = map_particles(advance, cloud.n, workers)
    ensure_finite(particles, t + dt, "truth state")
    return replace(cloud, particles=particles, t=t + dt, step=cloud.step + 1)


def cloud_stats(cloud: TruthCloud) -> StatState:
    """Empirical mean and covariance with divisor N"""
    u = cloud.particles
    mean = u.mean(axis=0)
    centered = u - mean
    cov = np.einsum("ni,nj->ij", centered, centered) / cloud.n
    return StatState(mean=mean, cov=symmetrize(cov))


def cloud_higher_moments(cloud: TruthCloud, order: int) -> HigherMoments:
    """Centered empirical moment tensor of order 3 or 4 plus marginal skewness and excess kurtosis"""
    if order not in (3, 4):
        raise ValueError(f"order must be 3 or 4, got {order}")
    u = cloud.particles
    centered = u - u.mean(axis=0)
    n = cloud.n
    if order == 3:
        tensor = np.einsum("ni,nj,nk->ijk", centered, centered, centered) / n
    else:
        tensor = np.einsum("ni,nj,nk,nl->ijkl", centered, centered, centered, centered) / n
    skew, kurt = marginal_shape(centered)
    return HigherMoments(tensor=tensor, skewness=skew, kurtosis=kurt)


def marginal_shape(centered: np.ndarray):
    """Marginal skewness and excess kurtosis of centered samples; zero where variance vanishes"""
    var = np.mean(centered ** 2, axis=0)
    m3 = np.mean(centered ** 3, axis=0)
    m4 = np.mean(centered ** 4, axis=0)
    safe = var > 1e-300
    skew = np.zeros_like(var)
    kurt = np.zeros_like(var)
    skew[safe] = m3[safe] / var[safe] ** 1.5
    kurt[safe] = m4[safe] / var[safe] ** 2 - 3.0
    return skew, kurt


@dataclass
class TruthRecord:
    t: float
    stats: StatState
    skewness: np.ndarray
    kurtosis: np.ndarray
    hm_bar: Optional[np.ndarray] = None
    hv_bar: Optional[np.ndarray] = None


@dataclass
class TruthPath:
    dt: float
    records: List[TruthRecord] = field(default_factory=list)
    snapshots: List[dict] = field(default_factory=list)
    final: Optional[TruthCloud] = None

    @property
    def times(self) -> np.ndarray:
        return np.array([rec.t for rec in self.records])

    def stats_at(self, t: float, tol: float = 1e-9) -> TruthRecord:
        times = self.times
        idx = int(np.argmin(np.abs(times - t)))
        if abs(times[idx] - t) > tol * max(1.0, abs(t)):
            raise KeyError(t)
        return self.records[idx]


def _record(cloud: TruthCloud, forms: Optional[SymQuadForms]) -> TruthRecord:
    stats = cloud_stats(cloud)
    centered = cloud.particles - stats.mean
    skew, kurt = marginal_shape(centered)
    hm_bar = hv_bar = None
    if forms is not None:
        hm_bar = obs_mean_fn(forms, centered).mean(axis=0)
        hv_bar = symmetrize(obs_cov_fn(forms, centered).mean(axis=0))
    return TruthRecord(t=cloud.t, stats=stats, skewness=skew, kurtosis=kurt, hm_bar=hm_bar, hv_bar=hv_bar)


def histogram_snapshot(cloud: TruthCloud, bins="fd") -> List[dict]:
    """Per-component histograms; 'fd' uses Freedman-Diaconis binning"""
    records = []
    for k in range(cloud.d):
        counts, edges = np.histogram(cloud.particles[:, k], bins=bins)
        records.append({
            "t": cloud.t,
            "component": k + 1,
            "bin_edges": edges.tolist(),
            "counts": counts.tolist(),
        })
    return records


def simulate_truth(sys: SpectralSystem, cloud: TruthCloud, dt: float, t_end: float,
                   record_every: int = 1, snapshot_every: Optional[int] = None,
                   forms: Optional[SymQuadForms] = None, workers: int = 1) -> TruthPath:
    """
    Advance the cloud to t_end, recording statistics every ``record_every``
    steps (including the initial state).
    """
    n_steps = int(round((t_end - cloud.t) / dt))
    if n_steps < 1:
        raise ValueError(f"t_end={t_end} must exceed the cloud time {cloud.t} by at least one step")
    logger.info(f"Truth run: N={cloud.n}, d={cloud.d}, dt={dt}, steps={n_steps}")

    path = TruthPath(dt=dt)
    t0 = cloud.t
    path.records.append(_record(cloud, forms))
    if snapshot_every:
        path.snapshots.extend(histogram_snapshot(cloud))

    for i in range(1, n_steps + 1):
        try:
            cloud = step_truth(sys, cloud, dt, workers)
        except Exception as e:
            if hasattr(e, "at_step"):
                raise e.at_step(i)
            raise
        # Pin the clock to the step grid
        cloud = replace(cloud, t=t0 + i * dt)
        if i % record_every == 0:
            path.records.append(_record(cloud, forms))
        if snapshot_every and i % snapshot_every == 0:
            path.snapshots.extend(histogram_snapshot(cloud))

    path.final = cloud
    logger.info(f"Truth run finished at t={cloud.t:.6g}")
    return path
