"""
Statistical observations y_n = (mean, covariance) at spacing delta, synthesized
from a truth run, and their piecewise-linear interpolation.

Values are packed as (mean | row-major covariance), p = d + d^2.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pandas as pd

from errors import InsufficientPathError, OutOfRangeError, SystemFileError
from rng import ParticleStreams
from spectral_model import SpectralSystem, StatState, observation_drifts, symmetrize
from truth_mc import TruthPath

logger = logging.getLogger(__name__)

KNOT_TOL = 1e-9
SPACING_RTOL = 1e-9

Amplitude = Union[float, np.ndarray]


def pack_stats(stats: StatState) -> np.ndarray:
    return np.concatenate([stats.mean, stats.cov.ravel()])


def unpack(values: np.ndarray, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split packed observation values into (mean, cov) blocks"""
    values = np.asarray(values, dtype=float)
    return values[..., :d], values[..., d:].reshape(values.shape[:-1] + (d, d))


def amplitude_array(gamma, shape) -> np.ndarray:
    """Broadcast a scalar or per-channel noise amplitude to the channel shape"""
    arr = np.broadcast_to(np.asarray(gamma, dtype=float), shape).copy()
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError(f"Noise amplitudes must be non-negative, got {gamma!r}")
    return arr


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    delta: float
    values: np.ndarray
    d: int
    gamma_m: Amplitude
    gamma_v: Amplitude
    t0: float = 0.0

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        p = self.d + self.d * self.d
        if values.shape[1] != p:
            raise ValueError(f"Observation values need {p} columns for d={self.d}, got {values.shape[1]}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if values.shape[0] < 2:
            raise ValueError("An observation series needs at least two observations")
        object.__setattr__(self, "values", values)

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.delta * np.arange(self.n_obs)

    @property
    def t_last(self) -> float:
        return self.t0 + self.delta * (self.n_obs - 1)

    @property
    def gm(self) -> np.ndarray:
        return amplitude_array(self.gamma_m, (self.d,))

    @property
    def gv(self) -> np.ndarray:
        return amplitude_array(self.gamma_v, (self.d, self.d))

    def _locate(self, t: float, allow_end: bool) -> Tuple[int, float]:
        s = (t - self.t0) / self.delta
        n = int(math.floor(s + KNOT_TOL))
        last = self.n_obs - 1
        if n < 0 or s > last + KNOT_TOL or n > last or (n == last and not allow_end):
            raise OutOfRangeError(t, self.t0, self.t_last)
        if n == last:
            return last - 1, 1.0
        return n, min(max(s - n, 0.0), 1.0)

    def covers(self, t_start: float, t_end: float) -> bool:
        return t_start >= self.t0 - KNOT_TOL * self.delta and t_end <= self.t_last + KNOT_TOL * self.delta


def interp_derivative(obs: ObservationSeries, t: float) -> np.ndarray:
    """Slope (y_{n+1} - y_n) / delta of the interval [t_n, t_{n+1}) containing t"""
    n, _ = obs._locate(t, allow_end=False)
    return (obs.values[n + 1] - obs.values[n]) / obs.delta


def interp_value(obs: ObservationSeries, t: float) -> np.ndarray:
    """Piecewise-linear value y^delta(t)"""
    n, frac = obs._locate(t, allow_end=True)
    if frac == 0.0:
        return obs.values[n].copy()
    if frac == 1.0:
        return obs.values[n + 1].copy()
    return obs.values[n] + frac * (obs.values[n + 1] - obs.values[n])


def _knot_records(truth_path: TruthPath, delta: float, t_end: float):
    n_obs = int(round(t_end / delta)) + 1
    times = delta * np.arange(n_obs)
    records = []
    for t in times:
        try:
            records.append(truth_path.stats_at(t, tol=KNOT_TOL))
        except KeyError:
            raise InsufficientPathError(f"Truth path has no record at observation time t={t:.6g}")
    return times, records


def synthesize(truth_path: TruthPath, delta: float, gamma_m: Amplitude, gamma_v: Amplitude,
               mode: str = "direct", seed: int = 0, t_end: float = None,
               sys: SpectralSystem = None) -> ObservationSeries:
    """
    Noisy statistical observations of a truth run.

    direct: y_n = truth moments at t_n + (Gamma_m sqrt(delta) xi, sym(Gamma_v sqrt(delta) xi)).
    sde:    integrates dy = [H-average + h(truth)] dt + Gamma dB along every recorded
            truth step; the H-averages are the truth cloud's empirical fluctuation averages.
    """
    if not truth_path.records:
        raise InsufficientPathError("Truth path is empty")
    t_end = truth_path.times[-1] if t_end is None else t_end
    if t_end > truth_path.times[-1] + KNOT_TOL:
        raise InsufficientPathError(f"Truth path ends at t={truth_path.times[-1]:.6g}, needs {t_end:.6g}")
    d = truth_path.records[0].stats.d
    gm = amplitude_array(gamma_m, (d,))
    gv = amplitude_array(gamma_v, (d, d))
    if not (np.all(np.isfinite(gm)) and np.all(np.isfinite(gv))):
        raise ValueError("Synthesis needs finite noise amplitudes")
    streams = ParticleStreams(seed)
    times, knots = _knot_records(truth_path, delta, t_end)

    if mode == "direct":
        xi_m = streams.normals("synth", 0, (len(times), d))
        xi_v = streams.normals("synth", 1, (len(times), d, d))
        sqrt_delta = math.sqrt(delta)
        rows = []
        for i, rec in enumerate(knots):
            mean = rec.stats.mean + gm * sqrt_delta * xi_m[i]
            cov = rec.stats.cov + symmetrize(gv * sqrt_delta * xi_v[i])
            rows.append(np.concatenate([mean, cov.ravel()]))
        values = np.array(rows)
    elif mode == "sde":
        if sys is None:
            raise ValueError("mode='sde' needs the spectral system for the drift terms")
        values = _synthesize_sde(truth_path, times, sys, gm, gv, streams)
    else:
        raise ValueError(f"Unknown synthesis mode '{mode}'. Allowed: direct, sde")

    logger.info(f"Synthesized {len(times)} observations (mode={mode}, delta={delta})")
    return ObservationSeries(delta=delta, values=values, d=d, gamma_m=gamma_m, gamma_v=gamma_v)


def _synthesize_sde(truth_path: TruthPath, times: np.ndarray, sys: SpectralSystem,
                    gm: np.ndarray, gv: np.ndarray, streams: ParticleStreams) -> np.ndarray:
    records = truth_path.records
    if records[0].hm_bar is None:
        raise InsufficientPathError("mode='sde' needs a truth path recorded with observation forms")
    d = sys.d
    y_mean = records[0].stats.mean.copy()
    y_cov = records[0].stats.cov.copy()
    rows = [np.concatenate([y_mean, y_cov.ravel()])]
    next_knot = 1

    for i in range(len(records) - 1):
        if next_knot >= len(times):
            break
        rec = records[i]
        dt = records[i + 1].t - rec.t
        ubar, cov = rec.stats.mean, rec.stats.cov
        h_m, h_v = observation_drifts(sys, ubar, cov, rec.t)
        xi = streams.normals("synth", i, (d + d * d,))
        db_m = math.sqrt(dt) * xi[:d]
        db_v = math.sqrt(dt) * xi[d:].reshape(d, d)
        y_mean = y_mean + (rec.hm_bar + h_m) * dt + gm * db_m
        y_cov = y_cov + (rec.hv_bar + h_v) * dt + symmetrize(gv * db_v)
        if abs(records[i + 1].t - times[next_knot]) <= KNOT_TOL * max(1.0, times[next_knot]):
            rows.append(np.concatenate([y_mean, y_cov.ravel()]))
            next_knot += 1

    if len(rows) != len(times):
        raise InsufficientPathError(f"Truth path covered {len(rows)} of {len(times)} observation times")
    return np.array(rows)


def obs_columns(d: int):
    return ["t"] + [f"ym_{k}" for k in range(1, d + 1)] + [
        f"yv_{k}{l}" for k in range(1, d + 1) for l in range(1, d + 1)
    ]


def save_observations(obs: ObservationSeries, path) -> Path:
    path = Path(path)
    frame = pd.DataFrame(np.column_stack([obs.times, obs.values]), columns=obs_columns(obs.d))
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {obs.n_obs} observations to {path}")
    return path


def load_observations(path, gamma_m: Amplitude, gamma_v: Amplitude) -> ObservationSeries:
    """Read an observation CSV and validate uniform spacing"""
    frame = pd.read_csv(path)
    n_value_cols = frame.shape[1] - 1
    d = int(round((-1 + math.sqrt(1 + 4 * n_value_cols)) / 2))
    if d < 1 or d + d * d != n_value_cols or list(frame.columns) != obs_columns(d):
        raise SystemFileError(f"Unexpected observation columns {list(frame.columns)}", key_path=str(path))
    times = frame["t"].to_numpy(dtype=float)
    if times.size < 2:
        raise SystemFileError("Need at least two observation rows", key_path=str(path))
    gaps = np.diff(times)
    delta = float(gaps.mean())
    if np.any(np.abs(gaps - delta) > SPACING_RTOL * abs(delta)) or delta <= 0:
        raise SystemFileError("Observation times must be uniformly spaced and increasing", key_path=str(path))
    values = frame.iloc[:, 1:].to_numpy(dtype=float)
    return ObservationSeries(delta=delta, values=values, d=d, gamma_m=gamma_m, gamma_v=gamma_v, t0=float(times[0]))
