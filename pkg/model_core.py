"""
Factor SV Model Core

Domain types and the deterministic linear-algebra kernels of the factor
stochastic volatility model

    Sigma_t = Lambda V_t Lambda' + diag(exp(h_idio_t)),    V_t = diag(exp(h_factor_t)).

Functions provided:

1. covariance_at(loadings, h_factor_t, h_idio_t)
   - Dense covariance reconstruction at one point in time
2. correlation_from_covariance(sigma)
   - Covariance to correlation conversion
3. communalities(loadings, h_factor_t, h_idio_t)
   - Share of each series' variance explained by the factors, plus their mean
4. precision_woodbury(loadings, h_factor_t, h_idio_t)
   - Inverse covariance through an r x r solve (Woodbury identity)
5. logdet_covariance(loadings, h_factor_t, h_idio_t)
   - Log-determinant through an r x r factorization (matrix determinant lemma)
6. lowrank_gaussian_logpdf(y, loadings, h_factor_t, h_idio_t)
   - Zero-mean Gaussian log density with the above covariance, never forming it
7. cholesky_with_jitter(a)
   - Cholesky factor with a single jittered retry, shared by every sampler
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from errors import ContractViolation, DomainError, NumericalError

logger = logging.getLogger(__name__)

# exp(40) already dwarfs any realistic variance
LOGVAR_BOUND = 40.0
LOG_2PI = float(np.log(2.0 * np.pi))


def clamp_logvar(h: np.ndarray) -> np.ndarray:
    """Clamp log-variances to [-40, 40] before exponentiation."""
    return np.clip(np.asarray(h, dtype=float), -LOGVAR_BOUND, LOGVAR_BOUND)


def as_loadings_array(lam, m: int) -> np.ndarray:
    """Coerce to an m x r float array; empty input means r = 0."""
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return np.zeros((m, 0))
    if lam.ndim == 1:
        return lam.reshape(m, -1)
    if lam.ndim != 2:
        raise ContractViolation(f"loadings must be a matrix, got {lam.ndim} dimensions")
    return lam


@dataclass
class ReturnsPanel:
    """m x T matrix of (demeaned) percent log-returns with labels."""

    values: np.ndarray
    series_labels: List[str] = field(default_factory=list)
    date_labels: List[str] = field(default_factory=list)
    demeaned: bool = False

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        m, T = self.values.shape
        if m < 1 or T < 2:
            raise ContractViolation(f"ReturnsPanel needs m >= 1 and T >= 2, got m={m}, T={T}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("ReturnsPanel contains non-finite entries")
        if not self.series_labels:
            self.series_labels = [f"series_{i + 1}" for i in range(m)]
        if not self.date_labels:
            self.date_labels = [str(t + 1) for t in range(T)]
        if len(self.series_labels) != m or len(self.date_labels) != T:
            raise ContractViolation(
                f"label lengths ({len(self.series_labels)}, {len(self.date_labels)}) do not match shape ({m}, {T})"
            )
        if self.demeaned:
            scale = np.maximum(np.abs(self.values).max(axis=1), 1.0)
            if np.any(np.abs(self.values.mean(axis=1)) > 1e-10 * scale):
                raise ContractViolation("panel flagged as demeaned but row means are not zero")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def window(self, end: int, start: int = 0) -> "ReturnsPanel":
        """Columns [start, end) as a new panel (labels kept, demeaned flag dropped)."""
        return ReturnsPanel(
            values=self.values[:, start:end].copy(),
            series_labels=list(self.series_labels),
            date_labels=list(self.date_labels[start:end]),
        )

    def to_frame(self) -> pd.DataFrame:
        """Dates as rows, series as columns (the CSV layout)."""
        return pd.DataFrame(self.values.T, index=self.date_labels, columns=self.series_labels)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, demean: bool = False) -> "ReturnsPanel":
        values = frame.to_numpy(dtype=float).T
        if demean:
            values = values - values.mean(axis=1, keepdims=True)
        return cls(
            values=values,
            series_labels=[str(c) for c in frame.columns],
            date_labels=[str(i) for i in frame.index],
            demeaned=demean,
        )


@dataclass
class LoadingsMatrix:
    """m x r factor loadings; restricted means zeros above the diagonal."""

    entries: np.ndarray
    restricted: bool = False

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=float)
        self.entries = as_loadings_array(entries, entries.shape[0] if entries.ndim else 0)
        if not np.all(np.isfinite(self.entries)):
            raise DomainError("loadings contain non-finite entries")
        if self.restricted and np.any(np.triu(self.entries, k=1) != 0.0):
            raise ContractViolation("restricted loadings have non-zero entries above the diagonal")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape


@dataclass
class LogVariancePaths:
    """Log-variance paths; column 0 holds the initial state h_0."""

    idio: np.ndarray
    factor: np.ndarray

    def __post_init__(self):
        self.idio = np.atleast_2d(np.asarray(self.idio, dtype=float))
        self.factor = np.asarray(self.factor, dtype=float).reshape(-1, self.idio.shape[1])
        if not (np.all(np.isfinite(self.idio)) and np.all(np.isfinite(self.factor))):
            raise DomainError("log-variance paths contain non-finite entries")


@dataclass
class SvParams:
    """AR(1) parameters of one log-variance process."""

    mu: float
    phi: float
    sigma: float

    def __post_init__(self):
        if not abs(self.phi) < 1.0:
            raise DomainError(f"persistence phi={self.phi} outside (-1, 1)")
        if not self.sigma > 0.0:
            raise DomainError(f"volatility of volatility sigma={self.sigma} must be positive")


@dataclass
class CovarianceAtTime:
    sigma: np.ndarray
    t: Optional[int] = None


@dataclass
class LatentState:
    """One complete MCMC configuration.

    Shapes: loadings m x r, factors r x T, h_idio m x (T+1), h_factor r x (T+1),
    mu/phi_idio/sigma_idio length m, phi_factor/sigma_factor length r,
    tau2 m x r, lambda2 length m (row-wise) or r (column-wise).
    """

    loadings: np.ndarray
    factors: np.ndarray
    h_idio: np.ndarray
    h_factor: np.ndarray
    mu: np.ndarray
    phi_idio: np.ndarray
    sigma_idio: np.ndarray
    phi_factor: np.ndarray
    sigma_factor: np.ndarray
    tau2: np.ndarray
    lambda2: np.ndarray

    @property
    def m(self) -> int:
        return self.loadings.shape[0]

    @property
    def r(self) -> int:
        return self.loadings.shape[1]

    @property
    def T(self) -> int:
        return self.h_idio.shape[1] - 1

    @property
    def log_variances(self) -> LogVariancePaths:
        return LogVariancePaths(idio=self.h_idio, factor=self.h_factor)

    def copy(self) -> "LatentState":
        return LatentState(**{name: np.array(value, copy=True) for name, value in self.__dict__.items()})

    def idio_params(self, i: int) -> SvParams:
        return SvParams(mu=float(self.mu[i]), phi=float(self.phi_idio[i]), sigma=float(self.sigma_idio[i]))

    def factor_params(self, j: int) -> SvParams:
        return SvParams(mu=0.0, phi=float(self.phi_factor[j]), sigma=float(self.sigma_factor[j]))

    def covariance(self, t: int) -> np.ndarray:
        """Sigma_t for t in 1..T (h index t)."""
        return covariance_at(self.loadings, self.h_factor[:, t], self.h_idio[:, t]).sigma


LoadingsLike = Union[LoadingsMatrix, np.ndarray]


def _check_inputs(loadings: LoadingsLike, h_factor_t, h_idio_t) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lam = loadings.entries if isinstance(loadings, LoadingsMatrix) else np.asarray(loadings, dtype=float)
    h_idio_t = np.atleast_1d(np.asarray(h_idio_t, dtype=float))
    h_factor_t = np.asarray(h_factor_t, dtype=float).reshape(-1)
    m = h_idio_t.shape[0]
    lam = as_loadings_array(lam, m)
    if lam.shape[0] != m or lam.shape[1] != h_factor_t.shape[0]:
        raise ContractViolation(
            f"dimension mismatch: loadings {lam.shape}, h_factor {h_factor_t.shape}, h_idio {h_idio_t.shape}"
        )
    return lam, clamp_logvar(h_factor_t), clamp_logvar(h_idio_t)


def cholesky_with_jitter(a: np.ndarray, what: str = "matrix") -> Tuple[np.ndarray, bool]:
    """Lower Cholesky factor usable with scipy.linalg.cho_solve.

    On failure, adds 1e-10 * trace / n to the diagonal and retries once.
    """
    a = np.asarray(a, dtype=float)
    try:
        return linalg.cho_factor(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        n = a.shape[0]
        jitter = 1e-10 * max(np.trace(a), np.finfo(float).tiny) / max(n, 1)
        logger.warning(f"Cholesky of {what} ({n}x{n}) failed, retrying with jitter {jitter:.3e}")
        try:
            return linalg.cho_factor(a + jitter * np.eye(n), lower=True, check_finite=False)
        except (linalg.LinAlgError, ValueError):
            try:
                condition = float(np.linalg.cond(a))
            except np.linalg.LinAlgError:
                condition = float("inf")
            raise NumericalError(f"{what} is not positive definite", condition=condition)


def covariance_at(loadings: LoadingsLike, h_factor_t, h_idio_t, t: Optional[int] = None) -> CovarianceAtTime:
    """Lambda diag(exp h_factor_t) Lambda' + diag(exp h_idio_t)."""
    lam, hf, hi = _check_inputs(loadings, h_factor_t, h_idio_t)
    sigma = (lam * np.exp(hf)) @ lam.T
    sigma = 0.5 * (sigma + sigma.T)
    sigma[np.diag_indices_from(sigma)] += np.exp(hi)
    return CovarianceAtTime(sigma=sigma, t=t)


def correlation_from_covariance(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    d = np.diag(sigma)
    if np.any(d <= 0.0):
        raise DomainError("covariance has a non-positive diagonal entry")
    s = 1.0 / np.sqrt(d)
    corr = sigma * s[:, None] * s[None, :]
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def communalities(loadings: LoadingsLike, h_factor_t, h_idio_t) -> Tuple[np.ndarray, float]:
    """Per-series communalities C_i = 1 - idiosyncratic / total variance, and their mean."""
    lam, hf, hi = _check_inputs(loadings, h_factor_t, h_idio_t)
    common = (lam**2) @ np.exp(hf)
    idio = np.exp(hi)
    per_series = np.clip(common / (common + idio), 0.0, 1.0)
    return per_series, float(np.mean(per_series))


def _woodbury_parts(lam: np.ndarray, hf: np.ndarray, hi: np.ndarray):
    """Inner r x r factorization shared by the precision and log-det kernels."""
    d_inv = np.exp(-hi)
    w = lam * d_inv[:, None]
    inner = lam.T @ w
    inner[np.diag_indices_from(inner)] += np.exp(-hf)
    factor = cholesky_with_jitter(inner, what="inner Woodbury matrix")
    return d_inv, w, factor


def precision_woodbury(loadings: LoadingsLike, h_factor_t, h_idio_t) -> np.ndarray:
    """Sigma_t^{-1} via the Woodbury identity; only an r x r system is factorized."""
    lam, hf, hi = _check_inputs(loadings, h_factor_t, h_idio_t)
    if lam.shape[1] == 0:
        return np.diag(np.exp(-hi))
    d_inv, w, factor = _woodbury_parts(lam, hf, hi)
    precision = -w @ linalg.cho_solve(factor, w.T, check_finite=False)
    precision = 0.5 * (precision + precision.T)
    precision[np.diag_indices_from(precision)] += d_inv
    return precision


def logdet_covariance(loadings: LoadingsLike, h_factor_t, h_idio_t) -> float:
    """log det Sigma_t = log det(V^-1 + L' D^-1 L) + log det V + log det D."""
    lam, hf, hi = _check_inputs(loadings, h_factor_t, h_idio_t)
    if lam.shape[1] == 0:
        return float(np.sum(hi))
    _, _, (chol, _) = _woodbury_parts(lam, hf, hi)
    return float(2.0 * np.sum(np.log(np.diag(chol))) + np.sum(hf) + np.sum(hi))


def lowrank_gaussian_logpdf(y: np.ndarray, loadings: LoadingsLike, h_factor_t, h_idio_t) -> float:
    """log N(y; 0, Sigma_t) using the Woodbury identity and determinant lemma."""
    lam, hf, hi = _check_inputs(loadings, h_factor_t, h_idio_t)
    y = np.asarray(y, dtype=float)
    m = y.shape[0]
    if lam.shape[1] == 0:
        return float(-0.5 * (m * LOG_2PI + np.sum(hi) + np.sum(y * y * np.exp(-hi))))
    d_inv, w, factor = _woodbury_parts(lam, hf, hi)
    wy = w.T @ y
    quad = float(np.sum(y * y * d_inv) - wy @ linalg.cho_solve(factor, wy, check_finite=False))
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0]))) + np.sum(hf) + np.sum(hi)
    return float(-0.5 * (m * LOG_2PI + logdet + quad))
