"""
Ensemble statistical filter with observations in mean and covariance.

Every step of size tau:
  1. gain context from the ensemble at step start,
  2. one combined Euler step for every particle: forecast drift + model
     noise + analysis increment driven by the interpolated observations,
  3. explicit update of (mean, covariance) with feedbacks from step start.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from closure_forecast import (
    ClosureState,
    DEFAULT_EPS,
    advance_stats,
    ensemble_feedbacks,
    fluctuation_drift,
    forecast_step,
    forecast_step_first_order,
    model_kick,
)
from errors import LabError, ObsExhaustedError
from gain_kernels import GAIN_VARIANTS, GainContext, drift, gain_cov, gain_mean
from obs_stream import ObservationSeries, interp_derivative, interp_value, unpack
from parallel import map_particles
from truth_mc import marginal_shape
from spectral_model import (
    SpectralSystem,
    StatState,
    SymQuadForms,
    ensure_finite,
    fluct_operator,
    obs_cov_fn,
    obs_mean_fn,
    observation_drifts,
)

logger = logging.getLogger(__name__)


class FilterConfig(BaseModel):
    tau: float = Field(gt=0)
    delta: float = Field(gt=0)
    N: int = Field(ge=2)
    T: float = Field(gt=0)
    eps: float = Field(default=DEFAULT_EPS, gt=0)
    seed: int = 0
    gain_variant: str = "euler_consistent"
    perturb_obs_noise: bool = True
    split_step: bool = False
    analysis_only: bool = False
    workers: int = Field(default=1, ge=1)

    @field_validator("N")
    @classmethod
    def _even_ensemble(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"N={value} must be even; initial ensembles are antithetic pairs")
        return value

    @field_validator("gain_variant")
    @classmethod
    def _known_variant(cls, value: str) -> str:
        if value not in GAIN_VARIANTS:
            raise ValueError(f"must be one of {', '.join(GAIN_VARIANTS)}")
        return value

    @model_validator(mode="after")
    def _delta_multiple_of_tau(self) -> "FilterConfig":
        ratio = self.delta / self.tau
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ValueError(f"delta={self.delta} must be an integer multiple of tau={self.tau}")
        return self

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.T / self.tau + 1e-9))


@dataclass
class FilterRecord:
    t: float
    mean: np.ndarray
    cov: np.ndarray
    hbar_m: np.ndarray
    hbar_v: np.ndarray
    c_h: np.ndarray
    psd_projections: int
    hm_spread: float
    skewness: np.ndarray
    kurtosis: np.ndarray


@dataclass
class FilterRun:
    records: List[FilterRecord] = field(default_factory=list)
    final: Optional[ClosureState] = None
    label: str = "filter"

    @property
    def times(self) -> np.ndarray:
        return np.array([rec.t for rec in self.records])

    def means(self) -> np.ndarray:
        return np.array([rec.mean for rec in self.records])

    def covs(self) -> np.ndarray:
        return np.array([rec.cov for rec in self.records])


def make_record(forms: SymQuadForms, st: ClosureState) -> FilterRecord:
    z = st.ens.particles
    hm = obs_mean_fn(forms, z)
    hv = obs_cov_fn(forms, z)
    hbar_m = hm.mean(axis=0)
    centered = hm - hbar_m
    c_h = np.einsum("na,nb->ab", centered, centered) / st.ens.n
    skew, kurt = marginal_shape(z - z.mean(axis=0))
    return FilterRecord(
        t=st.t,
        mean=st.stats.mean.copy(),
        cov=st.stats.cov.copy(),
        hbar_m=hbar_m,
        hbar_v=hv.mean(axis=0),
        c_h=c_h,
        psd_projections=st.psd_projections,
        hm_spread=float(np.sqrt(np.diag(c_h)).min()),
        skewness=skew,
        kurtosis=kurt,
    )


def analysis_increment(ctx: GainContext, z: np.ndarray, dy_m: np.ndarray, dy_v: np.ndarray,
                       y_val: np.ndarray, sys: SpectralSystem, tau: float, t: float,
                       noise_m: Optional[np.ndarray] = None,
                       noise_v: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-particle analysis displacement

        a tau + K^m {dy_m - [H^m(z) + h_m] tau - Gamma_m dB^m}
              + K^v {dy_v - [H^v(z) + h_v] tau - Gamma_v dB^v}

    ``noise_m`` / ``noise_v`` are standard normals of shape (..., d) and
    (..., d, d); None disables the perturbation terms. K Gamma dB is applied
    as K~ Gamma^{-1} dB so an infinite amplitude switches the channel off.
    """
    z = np.asarray(z, dtype=float)
    d = ctx.d
    ubar, cov = unpack(y_val, d)
    h_m, h_v = observation_drifts(sys, ubar, cov, t)
    sqrt_tau = math.sqrt(tau)

    innov_m = np.asarray(dy_m, dtype=float) - (obs_mean_fn(ctx.forms, z) + h_m) * tau
    innov_v = np.asarray(dy_v, dtype=float).reshape(d, d) - (obs_cov_fn(ctx.forms, z) + h_v) * tau
    innov_v = innov_v.reshape(innov_v.shape[:-2] + (d * d,))

    gt_m = gain_mean(ctx, z)
    gt_v = gain_cov(ctx, z)
    inc = (
        drift(ctx, z) * tau
        + np.einsum("...jk,...k->...j", gt_m * ctx.weights_m, innov_m)
        + np.einsum("...ja,...a->...j", gt_v * ctx.weights_v, innov_v)
    )
    if noise_m is not None:
        inc = inc - sqrt_tau * np.einsum("...jk,...k->...j", gt_m, noise_m / ctx.gamma_m)
    if noise_v is not None:
        scaled = (noise_v / ctx.gamma_v).reshape(noise_v.shape[:-2] + (d * d,))
        inc = inc - sqrt_tau * np.einsum("...ja,...a->...j", gt_v, scaled)
    return inc


def _analysis_rows(ctx: GainContext, z: np.ndarray, y_deriv: np.ndarray, y_val: np.ndarray,
                   sys: SpectralSystem, cfg: FilterConfig, st: ClosureState, workers: int) -> np.ndarray:
    d = sys.d
    dy = y_deriv * cfg.tau
    dy_m, dy_v = unpack(dy, d)
    noise_m = noise_v = None
    if cfg.perturb_obs_noise:
        noise_m = st.ens.streams.normals("obs_m", st.step, (st.ens.n, d))
        noise_v = st.ens.streams.normals("obs_v", st.step, (st.ens.n, d, d))

    def rows_fn(rows: slice) -> np.ndarray:
        return analysis_increment(
            ctx, z[rows], dy_m, dy_v, y_val, sys, cfg.tau, st.t,
            None if noise_m is None else noise_m[rows],
            None if noise_v is None else noise_v[rows],
        )

    return map_particles(rows_fn, st.ens.n, workers)


def filter_step(sys: SpectralSystem, forms: SymQuadForms, state: ClosureState,
                obs: ObservationSeries, cfg: FilterConfig) -> ClosureState:
    """One step of the ensemble statistical filter"""
    t = state.t
    if not obs.covers(t, t + cfg.tau):
        raise ObsExhaustedError(f"Observations cover [{obs.t0:.6g}, {obs.t_last:.6g}], step needs [{t:.6g}, {t + cfg.tau:.6g}]")

    y_deriv = interp_derivative(obs, t)
    y_val = interp_value(obs, t)
    z = state.ens.particles
    ctx = GainContext.from_particles(forms, z, obs.gamma_m, obs.gamma_v, cfg.gain_variant)
    fb = ensemble_feedbacks(forms, state.ens)
    workers = cfg.workers

    if cfg.analysis_only:
        particles = z + _analysis_rows(ctx, z, y_deriv, y_val, sys, cfg, state, workers)
        stats, projected = state.stats, False
    else:
        lop = fluct_operator(sys, state.stats.mean)
        kick = model_kick(sys, state, cfg.tau)
        cov = state.stats.cov

        def forecast_rows(rows: slice) -> np.ndarray:
            return fluctuation_drift(sys, lop, z[rows], cov) * cfg.tau + kick[rows]

        forecast = map_particles(forecast_rows, state.ens.n, workers)
        if cfg.split_step:
            predicted = z + forecast
            ctx = GainContext.from_particles(forms, predicted, obs.gamma_m, obs.gamma_v, cfg.gain_variant)
            particles = predicted + _analysis_rows(ctx, predicted, y_deriv, y_val, sys, cfg, state, workers)
        else:
            particles = z + forecast + _analysis_rows(ctx, z, y_deriv, y_val, sys, cfg, state, workers)
        stats, projected = advance_stats(sys, state, fb, cfg.tau)

    t_next = t + cfg.tau
    ensure_finite(particles, t_next, "filter ensemble")
    ensure_finite(np.concatenate([stats.mean, stats.cov.ravel()]), t_next, "filter statistics")
    return replace(
        state,
        ens=state.ens.with_particles(particles),
        stats=stats,
        t=t_next,
        step=state.step + 1,
        psd_projections=state.psd_projections + int(projected),
    )


def run_filter(sys: SpectralSystem, forms: SymQuadForms, obs: ObservationSeries, cfg: FilterConfig,
               init: ClosureState) -> FilterRun:
    """Iterate filter_step over floor(T / tau) steps, recording diagnostics every step"""
    if abs(obs.delta - cfg.delta) > 1e-12 * max(1.0, cfg.delta):
        logger.warning(f"Config delta={cfg.delta} differs from observation spacing {obs.delta}; using the series")
    n_steps = cfg.n_steps
    logger.info(f"Filter run: N={init.ens.n}, tau={cfg.tau}, steps={n_steps}, variant={cfg.gain_variant}")

    run = FilterRun(label="filter")
    state = init
    run.records.append(make_record(forms, state))
    t0 = init.t
    for i in range(n_steps):
        try:
            state = filter_step(sys, forms, state, obs, cfg)
        except LabError as e:
            logger.error(f"Filter failed at step {i}: {e.message}")
            raise e.at_step(i)
        state = replace(state, t=t0 + (i + 1) * cfg.tau)
        run.records.append(make_record(forms, state))
        logger.debug(f"step {i}: t={state.t:.6g} mean={state.stats.mean}")

    if state.psd_projections:
        logger.warning(f"{state.psd_projections} PSD projections during the filter run")
    run.final = state
    return run


def forecast_run(sys: SpectralSystem, forms: SymQuadForms, cfg: FilterConfig, init: ClosureState,
                 first_order: bool = False) -> FilterRun:
    """Forecast-only run with the same step grid, noise and record format as run_filter"""
    step_fn = forecast_step_first_order if first_order else forecast_step
    n_steps = cfg.n_steps
    logger.info(f"Forecast run: N={init.ens.n}, tau={cfg.tau}, steps={n_steps}")
    run = FilterRun(label="forecast")
    state = init
    run.records.append(make_record(forms, state))
    t0 = init.t
    for i in range(n_steps):
        try:
            state = step_fn(sys, forms, state, cfg.tau, cfg.workers)
        except LabError as e:
            raise e.at_step(i)
        state = replace(state, t=t0 + (i + 1) * cfg.tau)
        run.records.append(make_record(forms, state))
    run.final = state
    return run


def stats_of(record: FilterRecord) -> StatState:
    return StatState(record.mean, record.cov)
