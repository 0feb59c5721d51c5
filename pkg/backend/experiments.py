"""
Experiment orchestration: builtin prototype systems, twin experiments,
convergence sweeps, consistency harnesses and histogram diagnostics.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from scipy import stats as sps

from closure_forecast import init_closure_state
from errors import (
    BinMismatchError,
    ConfigValidationError,
    LabError,
    PipelineStageError,
    UnknownSystemError,
)
from filter_engine import FilterConfig, FilterRun, forecast_run, run_filter
from fp_oracle import (
    Grid1D,
    GridCovKernel,
    GridDensity,
    OracleRun,
    run_oracle,
)
from obs_stream import ObservationSeries, load_observations, synthesize
from rng import derive_seed
from spectral_model import SpectralSystem, StatState, SymQuadForms, TimeProfile
from system_parser import SystemParser
from truth_mc import TruthPath, init_truth_cloud, simulate_truth

logger = logging.getLogger(__name__)

EPS_BIN = 1e-12
SCENARIOS = ("truth", "forecast", "filter", "oracle", "converge", "analyze", "twin")
BUILTIN_SYSTEMS = ("ou1", "cubic1", "triad3", "l96s")
GRID_TOL = 1e-9

Amplitude = Union[float, List[float], List[List[float]]]


# ---------------------------------------------------------------------------
# Builtin prototype systems
# ---------------------------------------------------------------------------

def _ou1() -> SpectralSystem:
    return SpectralSystem(
        lam=[[-1.0]],
        gamma=np.zeros((1, 1, 1)),
        forcing=TimeProfile.zeros((1,)),
        noise=TimeProfile.constant([[math.sqrt(2.0)]]),
        name="ou1",
    )


def _cubic1() -> SpectralSystem:
    return SpectralSystem(
        lam=[[-1.0]],
        gamma=np.full((1, 1, 1), 0.25),
        forcing=TimeProfile.zeros((1,)),
        noise=TimeProfile.constant([[0.6]]),
        name="cubic1",
    )


def _triad3() -> SpectralSystem:
    # du_1 = b_1 u_2 u_3, du_2 = b_2 u_1 u_3, du_3 = b_3 u_1 u_2 with b_1 + b_2 + b_3 = 0
    b = (0.5, -0.3, -0.2)
    gamma = np.zeros((3, 3, 3))
    for k, (m, n) in enumerate([(1, 2), (0, 2), (0, 1)]):
        gamma[k, m, n] = gamma[k, n, m] = 0.5 * b[k]
    return SpectralSystem(
        lam=-np.eye(3),
        gamma=gamma,
        forcing=TimeProfile.zeros((3,)),
        noise=TimeProfile.constant(np.diag([0.8, 0.6, 0.6])),
        energy_conserving=True,
        name="triad3",
    )


def _l96s(d: int = 6, forcing: float = 8.0) -> SpectralSystem:
    gamma = np.zeros((d, d, d))
    for k in range(d):
        gamma[k, (k - 1) % d, (k + 1) % d] += 1.0
        gamma[k, (k - 2) % d, (k - 1) % d] -= 1.0
    return SpectralSystem(
        lam=-np.eye(d),
        gamma=gamma,
        forcing=TimeProfile.constant(np.full(d, forcing)),
        noise=TimeProfile.constant(0.5 * np.eye(d)),
        energy_conserving=True,
        name="l96s",
    )


_BUILDERS = {"ou1": _ou1, "cubic1": _cubic1, "triad3": _triad3, "l96s": _l96s}


def builtin_system(name: str) -> SpectralSystem:
    if name not in _BUILDERS:
        raise UnknownSystemError(name, _BUILDERS)
    return _BUILDERS[name]()


# ---------------------------------------------------------------------------
# Experiment specification
# ---------------------------------------------------------------------------

class TruthConfig(BaseModel):
    n_truth: int = Field(default=20000, ge=2)
    dt: float = Field(default=1e-3, gt=0)
    t_end: Optional[float] = Field(default=None, gt=0)
    snapshot_every: Optional[int] = Field(default=None, ge=1)


class ObservationConfig(BaseModel):
    delta: float = Field(gt=0)
    gamma_m: Amplitude = 1.0
    gamma_v: Amplitude = 1.0
    mode: Literal["direct", "sde"] = "direct"
    path: Optional[str] = None

    @field_validator("gamma_m", "gamma_v")
    @classmethod
    def _positive_amplitude(cls, value: Amplitude) -> Amplitude:
        arr = np.asarray(value, dtype=float)
        if arr.size == 0 or np.any(np.isnan(arr)) or np.any(arr <= 0):
            raise ValueError("noise amplitudes must be strictly positive (inf switches a channel off)")
        return value


class InitConfig(BaseModel):
    mean: Optional[List[float]] = None
    cov: Optional[List[List[float]]] = None
    var: float = Field(default=0.25, gt=0)

    def stats(self, d: int) -> StatState:
        mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=float)
        cov = self.var * np.eye(d) if self.cov is None else np.asarray(self.cov, dtype=float)
        if mean.shape != (d,) or cov.shape != (d, d):
            raise ConfigValidationError(f"init mean/cov must have shapes ({d},) and ({d}, {d})")
        return StatState(mean, cov)


class OracleConfig(BaseModel):
    m: int = Field(default=256, ge=32)
    width: float = Field(default=8.0, gt=0)
    dt: Optional[float] = Field(default=None, gt=0)
    mode: Literal["kb", "ks", "fp"] = "kb"
    snapshot_every: Optional[int] = Field(default=None, ge=1)


class SweepConfig(BaseModel):
    taus: List[float] = Field(default_factory=lambda: [4e-3, 2e-3, 1e-3, 5e-4])
    ns: List[int] = Field(default_factory=lambda: [512, 1024, 2048, 4096, 8192, 16384])
    replicates: int = Field(default=20, ge=2)
    ref_replicates: int = Field(default=4, ge=1)
    t_end: float = Field(default=1.0, gt=0)
    first_order: bool = False

    @field_validator("taus")
    @classmethod
    def _taus_nest(cls, taus: List[float]) -> List[float]:
        if len(taus) < 2 or any(t <= 0 for t in taus):
            raise ValueError("need at least two positive step sizes")
        coarse = max(taus)
        for tau in taus:
            ratio = coarse / tau
            if abs(ratio - round(ratio)) > GRID_TOL * ratio:
                raise ValueError(f"tau={tau} does not divide the coarsest step {coarse}")
        return sorted(taus, reverse=True)

    @field_validator("ns")
    @classmethod
    def _ns_valid(cls, ns: List[int]) -> List[int]:
        if len(ns) < 2 or any(n < 2 or n % 2 for n in ns):
            raise ValueError("need at least two even ensemble sizes")
        return sorted(ns)


class ExperimentSpec(BaseModel):
    scenario: Literal["truth", "forecast", "filter", "oracle", "converge", "analyze", "twin"] = "twin"
    system: Optional[str] = None
    builtin: Optional[str] = None
    seed: int = 0
    output_dir: Optional[str] = None
    run_dir: Optional[str] = None
    workers: int = Field(default=1, ge=1)
    filter: Optional[FilterConfig] = None
    truth: TruthConfig = Field(default_factory=TruthConfig)
    observations: Optional[ObservationConfig] = None
    init: InitConfig = Field(default_factory=InitConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentSpec":
        if self.scenario == "analyze":
            if not self.run_dir:
                raise ValueError("scenario 'analyze' needs run_dir")
            return self
        if (self.system is None) == (self.builtin is None):
            raise ValueError("give exactly one of 'system' (file path) or 'builtin'")
        if self.builtin is not None and self.builtin not in BUILTIN_SYSTEMS:
            raise ValueError(f"unknown builtin '{self.builtin}'. Available: {', '.join(BUILTIN_SYSTEMS)}")
        if self.system is not None and not Path(self.system).is_file():
            raise ValueError(f"system file '{self.system}' does not exist")
        if self.scenario in ("forecast", "filter", "oracle", "twin") and self.filter is None:
            raise ValueError(f"scenario '{self.scenario}' needs a 'filter' block")
        if self.scenario in ("filter", "oracle", "twin") and self.observations is None:
            raise ValueError(f"scenario '{self.scenario}' needs an 'observations' block")
        if self.observations is not None and self.filter is not None:
            if abs(self.observations.delta - self.filter.delta) > GRID_TOL * self.filter.delta:
                raise ValueError("observations.delta must equal filter.delta")
        if self.scenario in ("filter", "twin", "oracle", "truth") and self.filter is not None:
            _check_multiple(self.filter.tau, self.truth.dt, "filter.tau", "truth.dt")
        if self.observations is not None and self.observations.path is None:
            _check_multiple(self.observations.delta, self.truth.dt, "observations.delta", "truth.dt")
            if self.filter is not None:
                _check_multiple(self.filter.T, self.observations.delta, "filter.T", "observations.delta")
        if self.scenario == "truth" and self.filter is None and self.truth.t_end is None:
            raise ValueError("scenario 'truth' needs truth.t_end or a 'filter' block")
        if self.observations is not None and self.observations.path is not None:
            if not Path(self.observations.path).is_file():
                raise ValueError(f"observation file '{self.observations.path}' does not exist")
        return self


def _check_multiple(big: float, small: float, big_name: str, small_name: str) -> None:
    ratio = big / small
    if round(ratio) < 1 or abs(ratio - round(ratio)) > GRID_TOL * ratio:
        raise ValueError(f"{big_name}={big} must be an integer multiple of {small_name}={small}")


def load_spec(data: Dict[str, Any]) -> ExperimentSpec:
    """Validate a raw spec mapping; pydantic failures become ConfigValidationError"""
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigValidationError(f"Invalid experiment spec: {problems}") from e


def resolve_system(spec: ExperimentSpec) -> SpectralSystem:
    if spec.builtin is not None:
        return builtin_system(spec.builtin)
    return SystemParser().load(spec.system)


# ---------------------------------------------------------------------------
# Histogram diagnostics
# ---------------------------------------------------------------------------

class Histogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray


def shared_bins(reference: np.ndarray) -> np.ndarray:
    """Freedman-Diaconis bin edges of the reference samples"""
    return np.histogram_bin_edges(np.asarray(reference, dtype=float), bins="fd")


def histogram(samples: np.ndarray, edges: np.ndarray) -> Histogram:
    """Histogram on fixed edges; samples outside the range go to the end bins"""
    clipped = np.clip(np.asarray(samples, dtype=float), edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    return Histogram(np.asarray(edges, dtype=float), counts.astype(float))


def diagnostics_kl(hist_p: Histogram, hist_q: Histogram) -> float:
    """KL(p || q) of two histograms on the same bins after additive smoothing"""
    if hist_p.edges.shape != hist_q.edges.shape or not np.allclose(hist_p.edges, hist_q.edges, rtol=0, atol=1e-12):
        raise BinMismatchError("Histograms must share the same bin edges")
    p = hist_p.counts / hist_p.counts.sum() + EPS_BIN
    q = hist_q.counts / hist_q.counts.sum() + EPS_BIN
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def marginal_kl(truth: np.ndarray, other: np.ndarray) -> List[float]:
    """Per-component KL(truth || other) on Freedman-Diaconis bins of the truth samples"""
    out = []
    for k in range(truth.shape[1]):
        edges = shared_bins(truth[:, k])
        out.append(diagnostics_kl(histogram(truth[:, k], edges), histogram(other[:, k], edges)))
    return out


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    system: Optional[SpectralSystem] = None
    truth: Optional[TruthPath] = None
    observations: Optional[ObservationSeries] = None
    filter_run: Optional[FilterRun] = None
    forecast: Optional[FilterRun] = None
    oracle: Optional[OracleRun] = None
    sweep: Optional[pd.DataFrame] = None
    report: Dict[str, Any] = field(default_factory=dict)


def _stage(name: str, fn, *args, **kwargs):
    logger.info(f"Stage '{name}' started")
    try:
        result = fn(*args, **kwargs)
    except PipelineStageError:
        raise
    except (LabError, ValueError) as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise PipelineStageError(name, e) from e
    logger.info(f"Stage '{name}' finished")
    return result


def _truth_horizon(spec: ExperimentSpec) -> float:
    if spec.filter is not None:
        return spec.filter.T
    return spec.truth.t_end


def run_truth_stage(spec: ExperimentSpec, sys: SpectralSystem, forms: SymQuadForms) -> TruthPath:
    init = spec.init.stats(sys.d)
    cloud = init_truth_cloud(init, spec.truth.n_truth, derive_seed(spec.seed, "truth"))
    return simulate_truth(sys, cloud, spec.truth.dt, _truth_horizon(spec),
                          snapshot_every=spec.truth.snapshot_every, forms=forms, workers=spec.workers)


def observation_stage(spec: ExperimentSpec, sys: SpectralSystem, truth: Optional[TruthPath]) -> ObservationSeries:
    oc = spec.observations
    if oc.path is not None:
        return load_observations(oc.path, oc.gamma_m, oc.gamma_v)
    return synthesize(truth, oc.delta, oc.gamma_m, oc.gamma_v, mode=oc.mode,
                      seed=derive_seed(spec.seed, "obs"), t_end=spec.filter.T, sys=sys)


def _closure_init(spec: ExperimentSpec, sys: SpectralSystem, seed: Optional[int] = None,
                  n: Optional[int] = None):
    cfg = spec.filter
    return init_closure_state(spec.init.stats(sys.d), n or cfg.N, cfg.seed if seed is None else seed, cfg.eps)


def _filter_cfg(spec: ExperimentSpec) -> FilterConfig:
    return spec.filter.model_copy(update={"workers": spec.workers})


def run_forecast_stage(spec: ExperimentSpec, sys: SpectralSystem, forms: SymQuadForms) -> FilterRun:
    return forecast_run(sys, forms, _filter_cfg(spec), _closure_init(spec, sys))


def run_filter_stage(spec: ExperimentSpec, sys: SpectralSystem, forms: SymQuadForms,
                     obs: ObservationSeries) -> FilterRun:
    return run_filter(sys, forms, obs, _filter_cfg(spec), _closure_init(spec, sys))


def run_oracle_stage(spec: ExperimentSpec, sys: SpectralSystem, forms: SymQuadForms,
                     obs: ObservationSeries) -> OracleRun:
    if sys.d != 1:
        raise ConfigValidationError(f"The grid oracle needs a d=1 system, got d={sys.d}")
    oc = spec.oracle
    init = spec.init.stats(1)
    var = float(init.cov[0, 0])
    grid = Grid1D.around(math.sqrt(var), oc.m, oc.width)
    density = GridDensity.gaussian(grid, 0.0, var)
    dt = oc.dt or spec.filter.tau
    n_steps = int(math.floor(spec.filter.T / dt + GRID_TOL))
    kernel = GridCovKernel.from_density(density) if oc.mode == "kb" else None
    return run_oracle(sys, forms, obs, density, dt, n_steps, mode=oc.mode, kernel=kernel,
                      snapshot_every=oc.snapshot_every)


# ---------------------------------------------------------------------------
# Comparisons
# ---------------------------------------------------------------------------

def _aligned_errors(run: FilterRun, truth: TruthPath) -> pd.DataFrame:
    rows = []
    for rec in run.records:
        tr = truth.stats_at(rec.t, tol=GRID_TOL)
        rows.append({
            "t": rec.t,
            "mean_err": float(np.linalg.norm(rec.mean - tr.stats.mean)),
            "cov_err": float(np.linalg.norm(rec.cov - tr.stats.cov)),
            "skew_err": float(np.abs(rec.skewness - tr.skewness).mean()),
            "kurt_err": float(np.abs(rec.kurtosis - tr.kurtosis).mean()),
        })
    return pd.DataFrame(rows)


def _ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


def compare_runs(truth: TruthPath, filtered: FilterRun, forecast: FilterRun) -> Dict[str, Any]:
    """Error time series against the truth and forecast/filter improvement ratios (>1 favours the filter)"""
    f_err = _aligned_errors(filtered, truth)
    p_err = _aligned_errors(forecast, truth)
    report: Dict[str, Any] = {"errors": {"filter": f_err, "forecast": p_err}, "improvement": {}, "time_avg": {}}
    for col in ("mean_err", "cov_err", "skew_err", "kurt_err"):
        f_avg = float(f_err[col].mean())
        p_avg = float(p_err[col].mean())
        report["time_avg"][col] = {"filter": f_avg, "forecast": p_avg}
        report["improvement"][col] = _ratio(p_avg, f_avg)

    cloud = truth.final.particles
    for label, run in (("filter", filtered), ("forecast", forecast)):
        state = run.final
        samples = state.stats.mean + state.ens.particles
        report.setdefault("kl", {})[label] = marginal_kl(cloud, samples)
    return report


def _log_linear_fit(times: np.ndarray, values: np.ndarray) -> Dict[str, float]:
    keep = values > 0
    if keep.sum() < 3:
        return {"slope": math.nan, "r2": math.nan, "points": int(keep.sum())}
    fit = sps.linregress(times[keep], np.log(values[keep]))
    return {"slope": float(fit.slope), "r2": float(fit.rvalue ** 2), "points": int(keep.sum())}


def long_time_diagnostic(filtered: FilterRun, oracle: OracleRun, tail: float = 0.2) -> Dict[str, Any]:
    """
    Decay of |H rho_hat - Hbar| (oracle vs ensemble) with a log-linear fit, and
    the tail plateau of tr C^H against the oracle's projected kernel.
    """
    o_times = oracle.times
    rows = []
    for rec in filtered.records:
        idx = int(np.argmin(np.abs(o_times - rec.t)))
        if abs(o_times[idx] - rec.t) > GRID_TOL * max(1.0, rec.t):
            continue
        orec = oracle.records[idx]
        rows.append((rec.t, abs(orec.hm_rho - float(rec.hbar_m[0])), float(np.trace(rec.c_h)), orec.hch))
    if not rows:
        raise ConfigValidationError("Filter and oracle records share no common times")
    times, decay, tr_ch, hch = (np.array(col) for col in zip(*rows))
    start = int(len(times) * (1.0 - tail))
    plateau = float(tr_ch[start:].mean())
    oracle_plateau = float(hch[start:].mean())
    return {
        "times": times,
        "decay": decay,
        "fit": _log_linear_fit(times, decay),
        "plateau": plateau,
        "oracle_plateau": oracle_plateau,
        "plateau_rel_diff": _ratio(abs(plateau - oracle_plateau), abs(oracle_plateau)),
    }


@dataclass
class ConsistencyReport:
    times: np.ndarray
    hbar_err: np.ndarray
    ch_err: np.ndarray
    ks_kb_err: np.ndarray
    q_h_max: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.hbar_err.max() <= self.tolerance and self.ch_err.max() <= self.tolerance)

    def summary(self) -> Dict[str, Any]:
        return {
            "max_hbar_err": float(self.hbar_err.max()),
            "max_ch_err": float(self.ch_err.max()),
            "max_ks_kb_err": float(self.ks_kb_err.max()),
            "q_h_max": self.q_h_max,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def analysis_consistency(sys: SpectralSystem, obs: ObservationSeries, n: int, tau: float, steps: int,
                         init_var: float, m: int = 256, seed: int = 0, scale: float = 1.0,
                         workers: int = 1) -> ConsistencyReport:
    """
    Analysis-only ensemble run against the analysis-only Kalman-Bucy and
    reweighting grid solvers driven by the same observations (d=1). The tolerance is
    5 scale / sqrt(N) + tau + h^2; Q^H is reported alongside.
    """
    if sys.d != 1:
        raise ConfigValidationError("analysis_consistency needs a d=1 system")
    forms = SymQuadForms.from_system(sys)
    cfg = FilterConfig(tau=tau, delta=obs.delta, N=n, T=steps * tau, seed=seed,
                       analysis_only=True, workers=workers)
    ens_run = run_filter(sys, forms, obs, cfg, init_closure_state(StatState([0.0], [[init_var]]), n, seed))

    grid = Grid1D.around(math.sqrt(init_var), m)
    density = GridDensity.gaussian(grid, 0.0, init_var)
    kb = run_oracle(sys, forms, obs, density, tau, steps, mode="kb", kernel=GridCovKernel.from_density(density),
                    analysis_only=True)
    ks = run_oracle(sys, forms, obs, density, tau, steps, mode="ks")

    hbar = np.array([float(rec.hbar_m[0]) for rec in ens_run.records])
    ch = np.array([float(rec.c_h[0, 0]) for rec in ens_run.records])
    hm_rho = np.array([rec.hm_rho for rec in kb.records])
    hch = np.array([rec.hch for rec in kb.records])
    ks_hm = np.array([rec.hm_rho for rec in ks.records])
    q_h = max(abs(rec.q_h) for rec in ks.records)
    if q_h > 0.1 * scale:
        logger.warning(f"Third central H-moment {q_h:.3g} is large; consistency tolerance is loose")
    return ConsistencyReport(
        times=ens_run.times,
        hbar_err=np.abs(hbar - hm_rho),
        ch_err=np.abs(ch - hch),
        ks_kb_err=np.abs(ks_hm - hm_rho),
        q_h_max=float(q_h),
        tolerance=5.0 * scale / math.sqrt(n) + tau + grid.h ** 2,
    )


# ---------------------------------------------------------------------------
# Convergence sweep
# ---------------------------------------------------------------------------

def _forecast_stats(sys: SpectralSystem, forms: SymQuadForms, init: StatState, n: int, tau: float,
                    t_end: float, seed: int, eps: float, coarse: float, first_order: bool):
    cfg = FilterConfig(tau=tau, delta=tau, N=n, T=t_end, eps=eps, seed=seed)
    run = forecast_run(sys, forms, cfg, init_closure_state(init, n, seed, eps), first_order=first_order)
    stride = int(round(coarse / tau))
    picked = run.records[::stride]
    return np.array([rec.mean for rec in picked]), np.array([rec.cov for rec in picked])


def _sup_sq(a: np.ndarray, b: np.ndarray) -> float:
    diff = (a - b).reshape(len(a), -1)
    return float(np.max(np.sum(diff ** 2, axis=1)))


def _slope_ci(x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
    fit = sps.linregress(np.log(x), np.log(y))
    dof = len(x) - 2
    half = float(sps.t.ppf(0.975, dof) * fit.stderr) if dof > 0 else math.nan
    return {"slope": float(fit.slope), "ci_low": float(fit.slope) - half, "ci_high": float(fit.slope) + half,
            "r2": float(fit.rvalue ** 2)}


def run_convergence_sweep(spec: ExperimentSpec, sys: SpectralSystem, taus: Optional[List[float]] = None,
                          ns: Optional[List[int]] = None) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """
    Mean-square sup-errors of the closure statistics against a reference run
    (tau_min / 4, 4 N_max), swept over tau at N_max and over N at tau_min.
    """
    sw = spec.sweep
    taus = sorted(taus or sw.taus, reverse=True)
    ns = sorted(ns or sw.ns)
    forms = SymQuadForms.from_system(sys)
    init = spec.init.stats(sys.d)
    eps = spec.filter.eps if spec.filter is not None else 1.0
    coarse = taus[0]
    tau_ref, n_ref = taus[-1] / 4.0, 4 * ns[-1]

    def job(tau: float, n: int, rep: int):
        seed = derive_seed(spec.seed, tau, n, rep)
        try:
            return _forecast_stats(sys, forms, init, n, tau, sw.t_end, seed, eps, coarse, sw.first_order)
        except LabError as e:
            raise PipelineStageError(f"sweep tau={tau:g} N={n} seed={seed}", e) from e

    logger.info(f"Reference run: tau={tau_ref:g}, N={n_ref}, repeats={sw.ref_replicates}")
    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        refs = list(pool.map(lambda r: job(tau_ref, n_ref, r), range(sw.ref_replicates)))
    ref_mean = np.mean([r[0] for r in refs], axis=0)
    ref_cov = np.mean([r[1] for r in refs], axis=0)

    points = [("tau", tau, ns[-1]) for tau in taus] + [("N", taus[-1], n) for n in ns]
    jobs = [(kind, tau, n, rep) for kind, tau, n in points for rep in range(sw.replicates)]

    def point_errors(item):
        kind, tau, n, rep = item
        means, covs = job(tau, n, rep)
        return kind, tau, n, rep, _sup_sq(means, ref_mean), _sup_sq(covs, ref_cov)

    with ThreadPoolExecutor(max_workers=spec.workers) as pool:
        raw = pd.DataFrame(list(pool.map(point_errors, jobs)),
                           columns=["kind", "tau", "N", "replicate", "sq_err_mean", "sq_err_cov"])

    table = (raw.groupby(["kind", "tau", "N"], sort=False)
                .agg(mse_mean=("sq_err_mean", "mean"), mse_cov=("sq_err_cov", "mean"),
                     var_mean=("sq_err_mean", "var"), replicates=("replicate", "count"))
                .reset_index())
    tau_rows = table[table["kind"] == "tau"]
    n_rows = table[table["kind"] == "N"]
    report = {
        "reference": {"tau": tau_ref, "N": n_ref, "repeats": sw.ref_replicates},
        "tau_slope_mean": _slope_ci(tau_rows["tau"].to_numpy(), tau_rows["mse_mean"].to_numpy()),
        "tau_slope_cov": _slope_ci(tau_rows["tau"].to_numpy(), tau_rows["mse_cov"].to_numpy()),
        "n_slope_mean": _slope_ci(1.0 / n_rows["N"].to_numpy(), n_rows["mse_mean"].to_numpy()),
        "n_slope_cov": _slope_ci(1.0 / n_rows["N"].to_numpy(), n_rows["mse_cov"].to_numpy()),
    }
    for key in ("tau_slope_mean", "n_slope_mean"):
        logger.info(f"{key}: {report[key]['slope']:.3f} [{report[key]['ci_low']:.3f}, {report[key]['ci_high']:.3f}]")
    return table, report


# ---------------------------------------------------------------------------
# Scenario dispatch
# ---------------------------------------------------------------------------

def run_twin(spec: ExperimentSpec, sys: SpectralSystem) -> ExperimentResult:
    """truth -> observations -> forecast + filter (-> grid oracle for d=1) -> comparison report"""
    forms = SymQuadForms.from_system(sys)
    result = ExperimentResult(spec=spec, system=sys)
    result.truth = _stage("truth", run_truth_stage, spec, sys, forms)
    result.observations = _stage("observations", observation_stage, spec, sys, result.truth)
    result.forecast = _stage("forecast", run_forecast_stage, spec, sys, forms)
    result.filter_run = _stage("filter", run_filter_stage, spec, sys, forms, result.observations)
    report = _stage("diagnostics", compare_runs, result.truth, result.filter_run, result.forecast)
    if sys.d == 1:
        result.oracle = _stage("oracle", run_oracle_stage, spec, sys, forms, result.observations)
        report["oracle"] = _stage("oracle-diagnostics", long_time_diagnostic, result.filter_run, result.oracle)
    result.report = report
    return result


def run_experiment(spec: ExperimentSpec, sys: Optional[SpectralSystem] = None) -> ExperimentResult:
    """Dispatch a validated spec to its scenario"""
    if spec.scenario == "analyze":
        raise ConfigValidationError("Use analyze_run for the 'analyze' scenario")
    sys = sys or resolve_system(spec)
    forms = SymQuadForms.from_system(sys)
    logger.info(f"Scenario '{spec.scenario}' on system '{sys.name}' (d={sys.d})")

    if spec.scenario == "twin":
        return run_twin(spec, sys)

    result = ExperimentResult(spec=spec, system=sys)
    if spec.scenario == "truth":
        result.truth = _stage("truth", run_truth_stage, spec, sys, forms)
        final = result.truth.records[-1]
        result.report = {"t_end": final.t, "mean": final.stats.mean.tolist(), "cov": final.stats.cov.tolist(),
                         "skewness": final.skewness.tolist(), "kurtosis": final.kurtosis.tolist()}
    elif spec.scenario == "forecast":
        result.forecast = _stage("forecast", run_forecast_stage, spec, sys, forms)
        result.report = _run_summary(result.forecast)
    elif spec.scenario in ("filter", "oracle"):
        truth = None
        if spec.observations.path is None:
            truth = result.truth = _stage("truth", run_truth_stage, spec, sys, forms)
        result.observations = _stage("observations", observation_stage, spec, sys, truth)
        if spec.scenario == "filter":
            result.filter_run = _stage("filter", run_filter_stage, spec, sys, forms, result.observations)
            result.report = _run_summary(result.filter_run)
        else:
            result.oracle = _stage("oracle", run_oracle_stage, spec, sys, forms, result.observations)
            last = result.oracle.records[-1]
            result.report = {"t_end": last.t, "hm_rho": last.hm_rho, "hch": last.hch, "mass": last.mass}
    elif spec.scenario == "converge":
        result.sweep, result.report = _stage("converge", run_convergence_sweep, spec, sys)
    return result


def _run_summary(run: FilterRun) -> Dict[str, Any]:
    last = run.records[-1]
    return {"t_end": last.t, "steps": len(run.records) - 1, "mean": last.mean.tolist(),
            "cov": last.cov.tolist(), "psd_projections": last.psd_projections,
            "min_hm_spread": float(min(rec.hm_spread for rec in run.records))}


def analyze_run(run_dir) -> Dict[str, Any]:
    """
    Align truth.csv with filter.csv / forecast.csv from a run directory and
    summarize the statistic errors; histogram snapshots sharing bins are
    compared by KL divergence.
    """
    run_dir = Path(run_dir)
    truth_path = run_dir / "truth.csv"
    if not truth_path.is_file():
        raise ConfigValidationError(f"{truth_path} not found")
    truth = pd.read_csv(truth_path)
    stat_cols = [c for c in truth.columns if c.startswith("mean_") or c.startswith("cov_")]
    summary: Dict[str, Any] = {"run_dir": str(run_dir)}

    for label in ("filter", "forecast"):
        path = run_dir / f"{label}.csv"
        if not path.is_file():
            continue
        other = pd.read_csv(path)
        merged = pd.merge_asof(other.sort_values("t"), truth.sort_values("t"), on="t",
                               suffixes=("", "_truth"), tolerance=GRID_TOL, direction="nearest")
        merged = merged.dropna(subset=[f"{c}_truth" for c in stat_cols])
        if merged.empty:
            summary[label] = {"aligned": 0}
            continue
        mean_cols = [c for c in stat_cols if c.startswith("mean_")]
        cov_cols = [c for c in stat_cols if c.startswith("cov_")]
        mean_err = np.sqrt(sum((merged[c] - merged[f"{c}_truth"]) ** 2 for c in mean_cols))
        cov_err = np.sqrt(sum((merged[c] - merged[f"{c}_truth"]) ** 2 for c in cov_cols))
        summary[label] = {
            "aligned": int(len(merged)),
            "mean_err_avg": float(mean_err.mean()),
            "mean_err_max": float(mean_err.max()),
            "cov_err_avg": float(cov_err.mean()),
            "cov_err_max": float(cov_err.max()),
        }
    if "filter" in summary and "forecast" in summary and summary["filter"].get("aligned"):
        summary["improvement_mean"] = _ratio(summary["forecast"]["mean_err_avg"], summary["filter"]["mean_err_avg"])

    snapshots = run_dir / "truth_snapshots.ndjson"
    if snapshots.is_file():
        frame = pd.read_json(snapshots, lines=True)
        summary["snapshot_kl"] = _snapshot_kl(frame)
    return summary


def _snapshot_kl(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    """KL between each component's first and last snapshot when their bins agree"""
    out = []
    for comp, group in frame.groupby("component"):
        first, last = group.iloc[0], group.iloc[-1]
        try:
            kl = diagnostics_kl(Histogram(np.asarray(last["bin_edges"]), np.asarray(last["counts"], dtype=float)),
                                Histogram(np.asarray(first["bin_edges"]), np.asarray(first["counts"], dtype=float)))
        except BinMismatchError:
            kl = None
        out.append({"component": int(comp), "t_first": float(first["t"]), "t_last": float(last["t"]), "kl": kl})
    return out
