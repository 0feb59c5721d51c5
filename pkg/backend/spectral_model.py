"""
Quadratic dynamical system in spectral (coefficient) coordinates.

    du = [Lambda u + B(u, u) + F_t] dt + Sigma_t dW_t

with B(u, u)_k = sum_mn gamma_kmn u_m u_n. The orthonormal basis is the
canonical one, so every quantity here lives directly in coefficient space.
All operators accept a leading batch axis where that makes sense.
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Any, Dict, Optional, Tuple

import numpy as np

from errors import NonFiniteStateError

logger = logging.getLogger(__name__)

ENERGY_TOL = 1e-12
PSD_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class TimeProfile:
    """
    Time-dependent array given declaratively.

    kinds:
        constant    value
        sinusoidal  offset + amplitude * sin(omega * t + phase)
        piecewise   values[i] on [times[i], times[i+1])
        decaying    value * exp(-rate * t)
    """

    kind: str
    shape: Tuple[int, ...]
    params: Dict[str, Any] = field(default_factory=dict)

    KINDS = ("constant", "sinusoidal", "piecewise", "decaying")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"Unknown profile kind '{self.kind}'. Allowed: {', '.join(self.KINDS)}")
        for key, value in self.params.items():
            arr = np.asarray(value, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"Profile parameter '{key}' has non-finite entries")

    @classmethod
    def constant(cls, value) -> "TimeProfile":
        arr = np.asarray(value, dtype=float)
        return cls("constant", arr.shape, {"value": arr})

    @classmethod
    def zeros(cls, shape) -> "TimeProfile":
        return cls.constant(np.zeros(shape))

    def __call__(self, t: float) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            return np.array(p["value"], dtype=float)
        if self.kind == "sinusoidal":
            offset = np.asarray(p.get("offset", np.zeros(self.shape)), dtype=float)
            amp = np.asarray(p["amplitude"], dtype=float)
            return offset + amp * math.sin(float(p.get("omega", 1.0)) * t + float(p.get("phase", 0.0)))
        if self.kind == "piecewise":
            times = np.asarray(p["times"], dtype=float)
            idx = max(int(np.searchsorted(times, t, side="right")) - 1, 0)
            return np.array(p["values"][idx], dtype=float)
        # decaying
        return np.asarray(p["value"], dtype=float) * math.exp(-float(p["rate"]) * t)

    def to_dict(self) -> Dict[str, Any]:
        out = {"kind": self.kind}
        for key, value in self.params.items():
            out[key] = np.asarray(value).tolist() if not np.isscalar(value) else value
        return out


@dataclass(frozen=True, eq=False)
class SpectralSystem:
    lam: np.ndarray
    gamma: np.ndarray
    forcing: TimeProfile
    noise: TimeProfile
    energy_conserving: bool = False
    name: str = "custom"

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        d = lam.shape[0]
        gamma = np.asarray(self.gamma, dtype=float).reshape(d, d, d)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "gamma", gamma)

        if d < 1 or lam.shape != (d, d):
            raise ValueError(f"lambda must be a square matrix, got shape {lam.shape}")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(gamma))):
            raise ValueError("lambda and gamma must have finite entries")
        if self.forcing.shape != (d,):
            raise ValueError(f"forcing must have shape ({d},), got {self.forcing.shape}")
        if len(self.noise.shape) != 2 or self.noise.shape[0] != d:
            raise ValueError(f"noise must have shape ({d}, s), got {self.noise.shape}")
        if self.energy_conserving:
            residual = energy_residual(gamma)
            if residual > ENERGY_TOL:
                raise ValueError(f"energy_conserving is set but the symmetrized coupling has size {residual:.3e}")

    @property
    def d(self) -> int:
        return self.lam.shape[0]

    @property
    def s(self) -> int:
        return self.noise.shape[1]

    def noise_cov(self, t: float) -> np.ndarray:
        sigma = self.noise(t)
        return sigma @ sigma.T

    def describe(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "d": self.d,
            "s": self.s,
            "energy_conserving": bool(self.energy_conserving),
            "energy_residual": energy_residual(self.gamma),
            "forcing": self.forcing.kind,
            "noise": self.noise.kind,
        }


@dataclass(frozen=True, eq=False)
class StatState:
    """Statistical mean and covariance"""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean of length {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", symmetrize(cov))

    @property
    def d(self) -> int:
        return self.mean.size

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.cov).min())

    def is_psd(self, tol: float = PSD_TOL) -> bool:
        return self.min_eigenvalue() >= -tol


@dataclass(frozen=True, eq=False)
class SymQuadForms:
    """Symmetric matrices A_k with (A_k)_mn = (gamma_kmn + gamma_knm) / 2"""

    a_mats: np.ndarray

    @classmethod
    def from_system(cls, sys: SpectralSystem) -> "SymQuadForms":
        return cls.from_gamma(sys.gamma)

    @classmethod
    def from_gamma(cls, gamma: np.ndarray) -> "SymQuadForms":
        gamma = np.asarray(gamma, dtype=float)
        return cls(0.5 * (gamma + gamma.transpose(0, 2, 1)))

    @property
    def d(self) -> int:
        return self.a_mats.shape[0]


def symmetrize(mat: np.ndarray) -> np.ndarray:
    """Exact symmetrization over the last two axes"""
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def project_psd(cov: np.ndarray, tol: float = PSD_TOL) -> Tuple[np.ndarray, bool]:
    """
    Clamp negative eigenvalues to zero when the smallest is below -tol.

    Returns the projected matrix and whether anything was clamped.
    """
    cov = symmetrize(cov)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= -tol:
        return cov, False
    clamped = np.clip(vals, 0.0, None)
    projected = symmetrize((vecs * clamped) @ vecs.T)
    logger.debug(f"PSD projection clamped eigenvalue {vals.min():.3e}")
    return projected, True


def energy_residual(gamma: np.ndarray) -> float:
    """Largest entry of gamma symmetrized over all index permutations"""
    sym = sum(np.transpose(gamma, perm) for perm in permutations(range(3))) / 6.0
    return float(np.abs(sym).max()) if sym.size else 0.0


def quadratic_term(gamma: np.ndarray, u: np.ndarray) -> np.ndarray:
    """q(u)_k = sum_mn gamma_kmn u_m u_n, batched over leading axes"""
    return np.einsum("kmn,...m,...n->...k", gamma, u, u)


def mean_drift(sys: SpectralSystem, ubar: np.ndarray, t: float) -> np.ndarray:
    """M(u) + F_t; the higher-moment feedback Q_m is added by the caller"""
    ubar = np.asarray(ubar, dtype=float)
    return np.einsum("kp,...p->...k", sys.lam, ubar) + quadratic_term(sys.gamma, ubar) + sys.forcing(t)


def fluct_operator(sys: SpectralSystem, ubar: np.ndarray) -> np.ndarray:
    """L(u)_kl = Lambda_kl + sum_p u_p (gamma_kpl + gamma_klp)"""
    ubar = np.asarray(ubar, dtype=float)
    coupling = np.einsum("kpl,...p->...kl", sys.gamma, ubar) + np.einsum("klp,...p->...kl", sys.gamma, ubar)
    return sys.lam + coupling


def quad_coupling(sys: SpectralSystem, mat: np.ndarray) -> np.ndarray:
    """Gamma(M)_k = sum_mn gamma_kmn M_mn (linear in M)"""
    return np.einsum("kmn,...mn->...k", sys.gamma, mat)


def observation_drifts(sys: SpectralSystem, ubar: np.ndarray, cov: np.ndarray, t: float):
    """h_m = M(u) + F_t and h_v = L(u) R + R L(u)^T + Sigma Sigma^T"""
    lop = fluct_operator(sys, ubar)
    h_m = mean_drift(sys, ubar, t)
    h_v = lop @ cov + cov @ lop.T + sys.noise_cov(t)
    return h_m, h_v


def obs_mean_fn(forms: SymQuadForms, z: np.ndarray) -> np.ndarray:
    """H^m_k(z) = z^T A_k z"""
    z = np.asarray(z, dtype=float)
    return np.einsum("kmn,...m,...n->...k", forms.a_mats, z, z)


def obs_cov_fn(forms: SymQuadForms, z: np.ndarray) -> np.ndarray:
    """H^v_kl(z) = (z^T A_k z) z_l + z_k (z^T A_l z)"""
    z = np.asarray(z, dtype=float)
    hm = obs_mean_fn(forms, z)
    outer = hm[..., :, None] * z[..., None, :]
    return outer + np.swapaxes(outer, -1, -2)


def obs_mean_jacobian(forms: SymQuadForms, z: np.ndarray) -> np.ndarray:
    """J[..., k, j] = d H^m_k / d z_j = 2 (A_k z)_j"""
    z = np.asarray(z, dtype=float)
    return 2.0 * np.einsum("kjn,...n->...kj", forms.a_mats, z)


def obs_cov_jacobian(forms: SymQuadForms, z: np.ndarray) -> np.ndarray:
    """J[..., k, l, j] = d H^v_kl / d z_j"""
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    hm = obs_mean_fn(forms, z)
    dhm = obs_mean_jacobian(forms, z)
    eye = np.eye(d)
    # (dH^m_k) z_l + H^m_k delta_lj
    part = dhm[..., :, None, :] * z[..., None, :, None] + hm[..., :, None, None] * eye[None, :, :]
    return part + np.swapaxes(part, -3, -2)


def tensor_moments(x: np.ndarray, order: int) -> np.ndarray:
    """Empirical (uncentered) moment tensor of rows of x; divisor N"""
    n = x.shape[0]
    if order == 2:
        return np.einsum("ni,nj->ij", x, x) / n
    if order == 3:
        return np.einsum("ni,nj,nk->ijk", x, x, x) / n
    if order == 4:
        return np.einsum("ni,nj,nk,nl->ijkl", x, x, x, x) / n
    raise ValueError(f"Unsupported moment order {order}")


def random_system(d: int, rng: np.random.Generator, scale: float = 1.0, s: Optional[int] = None,
                  energy_conserving: bool = False) -> SpectralSystem:
    """Random system used by property checks and examples"""
    s = d if s is None else s
    lam = -np.eye(d) + 0.3 * scale * rng.standard_normal((d, d))
    gamma = scale * rng.standard_normal((d, d, d))
    if energy_conserving:
        sym = sum(np.transpose(gamma, perm) for perm in permutations(range(3))) / 6.0
        gamma = gamma - sym
    return SpectralSystem(
        lam=lam,
        gamma=gamma,
        forcing=TimeProfile.constant(0.1 * rng.standard_normal(d)),
        noise=TimeProfile.constant(0.5 * rng.standard_normal((d, s))),
        energy_conserving=energy_conserving,
        name=f"random{d}",
    )


BLOWUP_THRESHOLD = 1e8


def ensure_finite(arr: np.ndarray, t: float, what: str = "state") -> None:
    """Raise NonFiniteStateError on NaN/inf or magnitudes beyond the blow-up threshold"""
    if arr.size == 0:
        return
    finite = np.all(np.isfinite(arr))
    magnitude = float(np.max(np.abs(arr))) if finite else float("inf")
    if not finite or magnitude > BLOWUP_THRESHOLD:
        raise NonFiniteStateError(t, magnitude, what)
