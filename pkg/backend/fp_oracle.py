"""
One-dimensional grid reference solver for the fluctuation density.

Finite-volume Fokker-Planck forecast (upwind advection, central diffusion,
zero-flux walls), the Kalman-Bucy density/covariance-kernel filter and the
multiplicative Kushner-Stratonovich analysis update. Densities live on cell
centers; an M x M kernel C acts on functions as (C f)_i = h sum_j C_ij f_j.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from errors import CflViolationError, LabError, NegativeDensityError
from obs_stream import ObservationSeries, interp_derivative, interp_value, unpack
from spectral_model import (
    SpectralSystem,
    StatState,
    SymQuadForms,
    ensure_finite,
    fluct_operator,
    obs_cov_fn,
    obs_mean_fn,
    observation_drifts,
    quad_coupling,
    symmetrize,
)

logger = logging.getLogger(__name__)

MIN_CELLS = 32
MASS_TOL = 1e-9
BOUNDARY_MASS_TOL = 1e-8
RICCATI_MARGIN = 0.5


@dataclass(frozen=True, eq=False)
class Grid1D:
    z_min: float
    z_max: float
    m: int = 256

    def __post_init__(self):
        if self.m < MIN_CELLS:
            raise ValueError(f"Grid needs at least {MIN_CELLS} cells, got {self.m}")
        if not self.z_max > self.z_min:
            raise ValueError(f"Empty domain [{self.z_min}, {self.z_max}]")

    @classmethod
    def around(cls, std: float, m: int = 256, width: float = 8.0, center: float = 0.0) -> "Grid1D":
        """Symmetric domain of +/- width standard deviations"""
        half = width * std
        return cls(center - half, center + half, m)

    @property
    def h(self) -> float:
        return (self.z_max - self.z_min) / self.m

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.z_min, self.z_max, self.m + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.z_min + self.h * (np.arange(self.m) + 0.5)


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: Grid1D
    rho: np.ndarray
    clipped: int = 0  # cells clipped to zero by the step that produced this density

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float).reshape(self.grid.m)
        if np.any(rho < -MASS_TOL):
            raise ValueError(f"Density has negative values (min {rho.min():.3g})")
        object.__setattr__(self, "rho", rho)

    @classmethod
    def gaussian(cls, grid: Grid1D, mean: float, var: float) -> "GridDensity":
        z = grid.centers
        rho = np.exp(-0.5 * (z - mean) ** 2 / var)
        return cls(grid, rho / (rho.sum() * grid.h))

    @property
    def mass(self) -> float:
        return float(self.rho.sum() * self.grid.h)

    def normalized(self) -> "GridDensity":
        return GridDensity(self.grid, self.rho / (self.rho.sum() * self.grid.h))

    def boundary_mass(self, cells: int = 2) -> float:
        h = self.grid.h
        return float((self.rho[:cells].sum() + self.rho[-cells:].sum()) * h)


@dataclass(frozen=True, eq=False)
class GridCovKernel:
    grid: Grid1D
    c: np.ndarray
    asymmetry: float = 0.0

    def __post_init__(self):
        m = self.grid.m
        c = np.asarray(self.c, dtype=float).reshape(m, m)
        object.__setattr__(self, "c", c)

    @classmethod
    def from_density(cls, density: GridDensity) -> "GridCovKernel":
        """Covariance operator of the density: <f, C g> = Cov_rho(f, g)"""
        rho = density.rho
        return cls(density.grid, np.diag(rho) / density.grid.h - np.outer(rho, rho))

    @classmethod
    def zeros(cls, grid: Grid1D) -> "GridCovKernel":
        return cls(grid, np.zeros((grid.m, grid.m)))

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.grid.h * self.c @ f

    def quadratic_form(self, f: np.ndarray) -> float:
        return float(self.grid.h ** 2 * f @ self.c @ f)


class GridMoments(NamedTuple):
    mean: float
    var: float
    hm_mean: float
    hv_mean: float
    c_h: float
    q_h: float


def velocity(sys: SpectralSystem, stats: StatState, z: np.ndarray) -> np.ndarray:
    """Fluctuation drift L(u) z + gamma (z^2 - R) at scalar points z"""
    lop = fluct_operator(sys, stats.mean)
    z = np.asarray(z, dtype=float)
    zz = (z ** 2)[:, None, None] - stats.cov
    return lop[0, 0] * z + quad_coupling(sys, zz)[:, 0]


def fp_matrix(sys: SpectralSystem, stats: StatState, grid: Grid1D, t: float) -> np.ndarray:
    """
    Generator matrix A with d rho / dt = A rho. Columns sum to zero; all
    off-diagonal entries are nonnegative.
    """
    if sys.d != 1:
        raise ValueError(f"The grid solver supports d=1 systems only, got d={sys.d}")
    m, h = grid.m, grid.h
    diff = 0.5 * float(sys.noise_cov(t)[0, 0])
    v = velocity(sys, stats, grid.edges[1:-1])  # interior faces i+1/2, i = 0..m-2
    vp = np.maximum(v, 0.0) / h
    vm = np.minimum(v, 0.0) / h
    dd = diff / h ** 2

    a = np.zeros((m, m))
    left = np.arange(m - 1)
    right = left + 1
    # flux F = v+ rho_i + v- rho_{i+1} - D (rho_{i+1} - rho_i) / h leaves cell i, enters i+1
    a[left, left] -= vp + dd
    a[right, left] += vp + dd
    a[left, right] -= vm - dd
    a[right, right] += vm - dd
    return a


def _clip(grid: Grid1D, rho: np.ndarray, what: str, t: float) -> GridDensity:
    negative = rho < 0.0
    clipped = int(np.count_nonzero(negative))
    if clipped:
        logger.debug(f"{what}: clipped {clipped} negative cells (mass {-rho[negative].sum() * grid.h:.3g}) at t={t:.6g}")
    return GridDensity(grid, np.maximum(rho, 0.0), clipped)


def fp_dt_max(a: np.ndarray) -> float:
    rate = float(np.max(-np.diag(a)))
    return math.inf if rate <= 0 else 1.0 / rate


def _check_cfl(a: np.ndarray, dt: float) -> None:
    dt_max = fp_dt_max(a)
    if dt > dt_max:
        raise CflViolationError(dt, dt_max, "Fokker-Planck CFL")
    if dt > 0.9 * dt_max:
        logger.warning(f"dt={dt:.3g} is within 10% of the CFL bound {dt_max:.3g}")


def fp_step(sys: SpectralSystem, forms: SymQuadForms, rho: GridDensity, stats: StatState, dt: float,
            t: float = 0.0) -> GridDensity:
    """One explicit conservative finite-volume step of the fluctuation Fokker-Planck equation"""
    a = fp_matrix(sys, stats, rho.grid, t)
    _check_cfl(a, dt)
    new = rho.rho + dt * (a @ rho.rho)
    ensure_finite(new, t + dt, "grid density")
    return _clip(rho.grid, new, "grid density", t + dt)


def observation_profiles(forms: SymQuadForms, grid: Grid1D) -> Tuple[np.ndarray, np.ndarray]:
    """H^m and H^v sampled at cell centers"""
    z = grid.centers[:, None]
    return obs_mean_fn(forms, z)[:, 0], obs_cov_fn(forms, z)[:, 0, 0]


def _weights(gamma_m, gamma_v) -> Tuple[float, float]:
    gm = float(np.asarray(gamma_m, dtype=float).ravel()[0])
    gv = float(np.asarray(gamma_v, dtype=float).ravel()[0])
    if not (gm > 0 and gv > 0):
        raise ValueError("Observation noise amplitudes must be strictly positive")
    return gm ** -2.0, gv ** -2.0


def observation_drift_terms(sys: SpectralSystem, stats: StatState, t: float) -> Tuple[float, float]:
    h_m, h_v = observation_drifts(sys, stats.mean, stats.cov, t)
    return float(h_m[0]), float(h_v[0, 0])


def kb_filter_step(rho_hat: GridDensity, kernel: GridCovKernel, stats: StatState, y_deriv: np.ndarray,
                   sys: SpectralSystem, forms: SymQuadForms, dt: float, gamma_m=1.0, gamma_v=1.0,
                   t: float = 0.0, analysis_only: bool = False) -> Tuple[GridDensity, GridCovKernel]:
    """
    Explicit Euler step of the Kalman-Bucy density/kernel equations driven by
    the observation slope ``y_deriv`` = (du/dt, dR/dt).

    ``analysis_only`` drops the Fokker-Planck generator from both the density
    and the kernel update, leaving the observation terms alone.
    """
    grid = rho_hat.grid
    h = grid.h
    if analysis_only:
        a = np.zeros((grid.m, grid.m))
    else:
        a = fp_matrix(sys, stats, grid, t)
        _check_cfl(a, dt)
    w_m, w_v = _weights(gamma_m, gamma_v)
    hm, hv = observation_profiles(forms, grid)
    h_m, h_v = observation_drift_terms(sys, stats, t)
    dy_m, dy_v = unpack(np.asarray(y_deriv, dtype=float) * dt, 1)

    c = kernel.c
    c_hm = c @ hm
    c_hv = c @ hv
    riccati_rate = h ** 2 * (w_m * abs(hm @ c_hm) + w_v * abs(hv @ c_hv))
    if dt * riccati_rate > RICCATI_MARGIN:
        raise CflViolationError(dt, RICCATI_MARGIN / riccati_rate, "Riccati")

    rho = rho_hat.rho
    innov_m = float(dy_m[0]) - (h * hm @ rho + h_m) * dt
    innov_v = float(dy_v[0, 0]) - (h * hv @ rho + h_v) * dt
    new_rho = rho + dt * (a @ rho) + h * c_hm * w_m * innov_m + h * c_hv * w_v * innov_v

    new_c = c + dt * (
        a @ c + c @ a.T
        - h ** 2 * (w_m * np.outer(c_hm, c_hm) + w_v * np.outer(c_hv, c_hv))
    )
    asymmetry = float(np.abs(new_c - new_c.T).max())
    ensure_finite(new_rho, t + dt, "KB density")
    ensure_finite(new_c, t + dt, "KB kernel")
    return _clip(grid, new_rho, "KB density", t + dt), GridCovKernel(grid, symmetrize(new_c), asymmetry)


def ks_analysis_step(rho: GridDensity, y_deriv: np.ndarray, forms: SymQuadForms, stats: StatState,
                     dt: float, sys: SpectralSystem, gamma_m=1.0, gamma_v=1.0, t: float = 0.0) -> GridDensity:
    """
    Multiplicative reweighting rho *= 1 + dt sum_ch (H - <H>) Gamma^-2 (dy/dt - <H> - h),
    followed by renormalization to unit mass.
    """
    grid = rho.grid
    h = grid.h
    w_m, w_v = _weights(gamma_m, gamma_v)
    hm, hv = observation_profiles(forms, grid)
    h_m, h_v = observation_drift_terms(sys, stats, t)
    slope_m, slope_v = unpack(np.asarray(y_deriv, dtype=float), 1)

    p = rho.rho
    mean_hm = h * hm @ p
    mean_hv = h * hv @ p
    g = ((hm - mean_hm) * w_m * (float(slope_m[0]) - mean_hm - h_m)
         + (hv - mean_hv) * w_v * (float(slope_v[0, 0]) - mean_hv - h_v))
    factor = 1.0 + dt * g
    if np.any(factor[p > 0] < 0):
        dt_max = 1.0 / float(np.max(-g[p > 0]))
        raise NegativeDensityError(dt, dt_max)
    new = p * factor
    ensure_finite(new, t + dt, "KS density")
    return GridDensity(grid, new / (new.sum() * h))


def grid_moments(rho: GridDensity, forms: SymQuadForms) -> GridMoments:
    """Midpoint-rule moments of z, H^m, H^v and the centered second/third moments of H^m"""
    grid = rho.grid
    h = grid.h
    z = grid.centers
    p = rho.rho
    hm, hv = observation_profiles(forms, grid)
    mean = h * z @ p
    hm_mean = h * hm @ p
    dev = hm - hm_mean
    return GridMoments(
        mean=float(mean),
        var=float(h * ((z - mean) ** 2) @ p),
        hm_mean=float(hm_mean),
        hv_mean=float(h * hv @ p),
        c_h=float(h * (dev ** 2) @ p),
        q_h=float(h * (dev ** 3) @ p),
    )


def kb_projections(rho_hat: GridDensity, kernel: GridCovKernel, forms: SymQuadForms) -> Tuple[float, float]:
    """(H rho, H C H*) for the mean channel"""
    hm, _ = observation_profiles(forms, rho_hat.grid)
    h = rho_hat.grid.h
    return float(h * hm @ rho_hat.rho), kernel.quadratic_form(hm)


def density_snapshot(rho: GridDensity, t: float, with_centers: bool = False) -> Dict:
    record = {"t": t, "rho": rho.rho.tolist()}
    if with_centers:
        record["z_centers"] = rho.grid.centers.tolist()
    return record


@dataclass
class OracleRecord:
    t: float
    mean: float
    var: float
    hm_rho: float
    hch: float
    c_h: float
    q_h: float
    mass: float
    clipped: int = 0


@dataclass
class OracleRun:
    records: List[OracleRecord] = field(default_factory=list)
    snapshots: List[Dict] = field(default_factory=list)
    density: Optional[GridDensity] = None
    kernel: Optional[GridCovKernel] = None

    @property
    def times(self) -> np.ndarray:
        return np.array([rec.t for rec in self.records])


def _oracle_record(t: float, density: GridDensity, kernel: Optional[GridCovKernel],
                   forms: SymQuadForms, clipped: int = 0) -> OracleRecord:
    mom = grid_moments(density, forms)
    hm_rho, hch = (mom.hm_mean, mom.c_h) if kernel is None else kb_projections(density, kernel, forms)
    return OracleRecord(t=t, mean=mom.mean, var=mom.var, hm_rho=hm_rho, hch=hch,
                        c_h=mom.c_h, q_h=mom.q_h, mass=density.mass, clipped=clipped)


def run_oracle(sys: SpectralSystem, forms: SymQuadForms, obs: ObservationSeries, density: GridDensity,
               dt: float, n_steps: int, mode: str = "kb", kernel: Optional[GridCovKernel] = None,
               snapshot_every: Optional[int] = None, analysis_only: bool = False) -> OracleRun:
    """
    Drive the grid solver with an observation series. The statistics entering
    the generator and the drift terms are the interpolated observations.

    mode: 'kb' (Kalman-Bucy density + kernel), 'ks' (analysis-only reweighting)
    or 'fp' (forecast only).

    ``analysis_only`` removes the generator from the 'kb' step. Records carry
    the running count of density cells clipped to zero.
    """
    if mode not in ("kb", "ks", "fp"):
        raise ValueError(f"Unknown oracle mode '{mode}'. Allowed: kb, ks, fp")
    if obs.d != 1:
        raise ValueError("The grid solver needs d=1 observations")
    if mode == "kb" and kernel is None:
        kernel = GridCovKernel.from_density(density)
    if density.boundary_mass() > BOUNDARY_MASS_TOL:
        logger.warning(f"Initial density puts {density.boundary_mass():.2e} mass next to the walls")
    logger.info(f"Oracle run: mode={mode}, M={density.grid.m}, dt={dt}, steps={n_steps}")

    run = OracleRun()
    t0 = obs.t0
    clipped = 0
    run.records.append(_oracle_record(t0, density, kernel if mode == "kb" else None, forms))
    for i in range(n_steps):
        t = t0 + i * dt
        try:
            y_val = interp_value(obs, t)
            ubar, cov = unpack(y_val, 1)
            stats = StatState(ubar, cov)
            if mode == "fp":
                density = fp_step(sys, forms, density, stats, dt, t)
            elif mode == "ks":
                density = ks_analysis_step(density, interp_derivative(obs, t), forms, stats, dt, sys,
                                           obs.gamma_m, obs.gamma_v, t)
            else:
                density, kernel = kb_filter_step(density, kernel, stats, interp_derivative(obs, t), sys, forms,
                                                 dt, obs.gamma_m, obs.gamma_v, t, analysis_only)
        except LabError as e:
            raise e.at_step(i)
        clipped += density.clipped
        t_next = t0 + (i + 1) * dt
        run.records.append(_oracle_record(t_next, density, kernel if mode == "kb" else None, forms, clipped))
        if snapshot_every and (i + 1) % snapshot_every == 0:
            run.snapshots.append(density_snapshot(density, t_next))

    if clipped:
        logger.warning(f"{clipped} negative density cells clipped to zero during the {mode} run "
                       f"(final mass {density.mass:.6g})")
    run.density = density
    run.kernel = kernel
    return run


def riccati_reference(c0: float, q: float, gamma: float, t: np.ndarray) -> np.ndarray:
    """Closed-form solution of dc/dt = -c^2 q / Gamma^2"""
    return c0 / (1.0 + c0 * q * np.asarray(t, dtype=float) / gamma ** 2)
