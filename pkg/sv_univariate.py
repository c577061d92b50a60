"""
Univariate stochastic volatility block update.

One call performs a full MCMC update of a single log-variance path h_0..h_T and
its AR(1) parameters given conditionally Gaussian observations:

1. linearize with log(y^2 + c) and draw the 10-component mixture indicators
   approximating the log chi-square(1) innovation
2. draw the whole state path at once from its tridiagonal Gaussian full
   conditional (banded Cholesky)
3. draw (mu, phi, sigma) in the centered parameterization with an
   independence Metropolis-Hastings step
4. redraw (mu, sigma) in the non-centered parameterization (ancillarity-
   sufficiency interweaving) and map back
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from errors import ContractViolation, DomainError
from model_core import SvParams
from samplers import RngHandle, sample_beta, sample_gamma

logger = logging.getLogger(__name__)

OFFSET = 1e-8

# 10-component normal mixture for log chi-square(1)
MIX_PROB = np.array([0.00609, 0.04775, 0.13057, 0.20674, 0.22715, 0.18842, 0.12047, 0.05591, 0.01575, 0.00115])
MIX_MEAN = np.array([1.92677, 1.34744, 0.73504, 0.02266, -0.85173, -1.97278, -3.46788, -5.55246, -8.68384, -14.65000])
MIX_VAR = np.array([0.11265, 0.17788, 0.26768, 0.40611, 0.62699, 0.98583, 1.57469, 2.54498, 4.16591, 7.33342])
_MIX_LOGWEIGHT = np.log(MIX_PROB) - 0.5 * np.log(MIX_VAR)

# auxiliary proposal prior for the centered parameter step: near-flat Gaussian
# on the regression coefficients and a weak inverse gamma on sigma^2
AUX_RIDGE = 1e-10
AUX_SHAPE = 0.5
AUX_SCALE = 1e-4


@dataclass(frozen=True)
class SvPriors:
    """mu ~ N(b_mu, B_mu), (phi + 1) / 2 ~ Beta(a0, b0), sigma^2 ~ B_sigma * chi^2_1."""

    b_mu: float = 0.0
    B_mu: float = 1000.0
    a0: float = 10.0
    b0: float = 2.5
    B_sigma: float = 1.0

    def validate(self) -> None:
        for name in ("B_mu", "a0", "b0", "B_sigma"):
            if not getattr(self, name) > 0.0:
                raise DomainError(f"SV prior {name}={getattr(self, name)} must be positive")


@dataclass
class SvBlock:
    states: np.ndarray
    params: SvParams
    has_level: bool = True

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if not self.has_level and self.params.mu != 0.0:
            raise ContractViolation("a block without level must keep mu = 0")


def sv_stationary_init(rng: RngHandle, params: SvParams, has_level: bool = True) -> float:
    """Draw h_0 from N(mu * has_level, sigma^2 / (1 - phi^2))."""
    if not abs(params.phi) < 1.0:
        raise DomainError(f"stationary distribution needs |phi| < 1, got {params.phi}")
    mean = params.mu if has_level else 0.0
    sd = params.sigma / math.sqrt(1.0 - params.phi**2)
    return float(rng.generator.normal(mean, sd))


def sv_prior_draw(rng: RngHandle, priors: SvPriors, has_level: bool = True) -> SvParams:
    """(mu, phi, sigma) from the prior; mu is 0 for a block without level."""
    mu = float(rng.generator.normal(priors.b_mu, math.sqrt(priors.B_mu))) if has_level else 0.0
    phi = 2.0 * sample_beta(rng, priors.a0, priors.b0) - 1.0
    sigma2 = sample_gamma(rng, 0.5, 0.5 / priors.B_sigma)
    return SvParams(mu=mu, phi=phi, sigma=math.sqrt(sigma2))


def _draw_indicators(gen: np.random.Generator, residual: np.ndarray) -> np.ndarray:
    logw = _MIX_LOGWEIGHT[None, :] - 0.5 * (residual[:, None] - MIX_MEAN[None, :]) ** 2 / MIX_VAR[None, :]
    weights = np.exp(logw - logw.max(axis=1, keepdims=True))
    cumulative = np.cumsum(weights, axis=1)
    u = gen.random(residual.shape[0]) * cumulative[:, -1]
    return np.minimum((cumulative < u[:, None]).sum(axis=1), MIX_PROB.shape[0] - 1)


def _draw_states(gen, ystar, indicators, mu, phi, sigma) -> np.ndarray:
    """Joint draw of h_0..h_T from the tridiagonal Gaussian full conditional."""
    T = ystar.shape[0]
    s2 = sigma * sigma
    v = MIX_VAR[indicators]

    diag = np.empty(T + 1)
    diag[0] = 1.0 / s2
    diag[1:T] = (1.0 + phi * phi) / s2
    diag[T] = 1.0 / s2
    diag[1:] += 1.0 / v

    prior_lin = np.empty(T + 1)
    prior_lin[0] = (1.0 - phi) / s2
    prior_lin[1:T] = (1.0 - phi) ** 2 / s2
    prior_lin[T] = (1.0 - phi) / s2
    lin = mu * prior_lin
    lin[1:] += (ystar - MIX_MEAN[indicators]) / v

    banded = np.zeros((2, T + 1))
    banded[0, 1:] = -phi / s2
    banded[1, :] = diag
    chol = linalg.cholesky_banded(banded, lower=False, check_finite=False)
    mean = linalg.cho_solve_banded((chol, False), lin, check_finite=False)
    return mean + linalg.solve_banded((0, 1), chol, gen.standard_normal(T + 1), check_finite=False)


def _log_weight(mu, phi, s2, beta, h0, priors: SvPriors, has_level: bool) -> float:
    """log target prior / auxiliary proposal prior, in (gamma, phi, sigma^2) coordinates."""
    if not abs(phi) < 1.0 or not s2 > 0.0:
        return -math.inf
    logw = (priors.a0 - 1.0) * math.log1p(phi) + (priors.b0 - 1.0) * math.log1p(-phi)
    logw += -0.5 * math.log(s2) - s2 / (2.0 * priors.B_sigma)
    logw += -0.5 * math.log(s2 / (1.0 - phi * phi)) - 0.5 * (h0 - mu) ** 2 * (1.0 - phi * phi) / s2
    if has_level:
        logw += -0.5 * (mu - priors.b_mu) ** 2 / priors.B_mu - math.log(abs(1.0 - phi))
    d = beta.shape[0]
    log_aux = -0.5 * d * math.log(s2) - 0.5 * AUX_RIDGE * float(beta @ beta) / s2
    log_aux += -(AUX_SHAPE + 1.0) * math.log(s2) - AUX_SCALE / s2
    return logw - log_aux


def _draw_params_centered(gen, h, mu, phi, sigma, priors: SvPriors, has_level: bool):
    T = h.shape[0] - 1
    z = h[1:]
    if has_level:
        X = np.column_stack([np.ones(T), h[:-1]])
    else:
        X = h[:-1, None]
    d = X.shape[1]
    precision = X.T @ X + AUX_RIDGE * np.eye(d)
    chol = linalg.cho_factor(precision, lower=True, check_finite=False)
    beta_hat = linalg.cho_solve(chol, X.T @ z, check_finite=False)
    ssr = max(float(z @ z - beta_hat @ precision @ beta_hat), 0.0)

    s2_new = 1.0 / gen.gamma(AUX_SHAPE + 0.5 * T, 1.0 / (AUX_SCALE + 0.5 * ssr))
    lower = np.tril(chol[0])
    beta_new = beta_hat + math.sqrt(s2_new) * linalg.solve_triangular(
        lower, gen.standard_normal(d), lower=True, trans="T", check_finite=False
    )
    if has_level:
        phi_new = float(beta_new[1])
        mu_new = float(beta_new[0] / (1.0 - phi_new)) if phi_new != 1.0 else math.inf
        beta_old = np.array([mu * (1.0 - phi), phi])
    else:
        phi_new = float(beta_new[0])
        mu_new = 0.0
        beta_old = np.array([phi])

    log_new = _log_weight(mu_new, phi_new, s2_new, beta_new, h[0], priors, has_level)
    log_old = _log_weight(mu, phi, sigma * sigma, beta_old, h[0], priors, has_level)
    if math.isfinite(log_new) and math.log(gen.random()) < log_new - log_old:
        return mu_new, phi_new, math.sqrt(s2_new)
    return mu, phi, sigma


def _interweave(gen, ystar, indicators, h, mu, phi, sigma, priors: SvPriors, has_level: bool):
    """Redraw (mu, sigma) given the standardized path (h - mu) / sigma."""
    h_tilde = (h - mu) / sigma
    target = ystar - MIX_MEAN[indicators]
    w = 1.0 / MIX_VAR[indicators]
    ht = h_tilde[1:]
    if has_level:
        X = np.column_stack([np.ones_like(ht), ht])
        precision = X.T @ (X * w[:, None]) + np.diag([1.0 / priors.B_mu, 1.0 / priors.B_sigma])
        rhs = X.T @ (w * target) + np.array([priors.b_mu / priors.B_mu, 0.0])
    else:
        X = ht[:, None]
        precision = X.T @ (X * w[:, None]) + np.array([[1.0 / priors.B_sigma]])
        rhs = X.T @ (w * target)
    chol = linalg.cho_factor(precision, lower=True, check_finite=False)
    mean = linalg.cho_solve(chol, rhs, check_finite=False)
    draw = mean + linalg.solve_triangular(
        np.tril(chol[0]), gen.standard_normal(mean.shape[0]), lower=True, trans="T", check_finite=False
    )
    mu_new = float(draw[0]) if has_level else 0.0
    sigma_new = float(draw[-1])
    if sigma_new < 0.0:
        sigma_new, h_tilde = -sigma_new, -h_tilde
    if sigma_new == 0.0:
        return h, mu, sigma
    return mu_new + sigma_new * h_tilde, mu_new, sigma_new


def sv_update(rng: RngHandle, observations: np.ndarray, block: SvBlock, priors: SvPriors) -> SvBlock:
    """One Markov transition for (h, mu, phi, sigma) of a single volatility block."""
    y = np.asarray(observations, dtype=float).reshape(-1)
    T = y.shape[0]
    if T == 0:
        raise ContractViolation("sv_update needs at least one observation")
    if not np.all(np.isfinite(y)):
        raise DomainError("sv_update received non-finite observations")
    if block.states.shape[0] != T + 1:
        raise ContractViolation(f"state path has length {block.states.shape[0]}, expected {T + 1}")

    gen = rng.generator
    mu = block.params.mu if block.has_level else 0.0
    phi, sigma = block.params.phi, block.params.sigma

    ystar = np.log(y * y + OFFSET)
    indicators = _draw_indicators(gen, ystar - block.states[1:])
    h = _draw_states(gen, ystar, indicators, mu, phi, sigma)
    mu, phi, sigma = _draw_params_centered(gen, h, mu, phi, sigma, priors, block.has_level)
    h, mu, sigma = _interweave(gen, ystar, indicators, h, mu, phi, sigma, priors, block.has_level)

    return SvBlock(states=h, params=SvParams(mu=mu, phi=phi, sigma=sigma), has_level=block.has_level)
