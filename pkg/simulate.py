"""
Ground-truth simulation from the factor SV model.

    h_it ~ AR(1) around mu_i,   h_{m+j,t} ~ AR(1) around 0   (stationary start)
    f_t ~ N(0, diag(exp h_factor_t)),  y_t = Lambda f_t + eps_t,  eps_t ~ N(0, diag(exp h_idio_t))

fixture_small and fixture_large build the ten-series and hundred-series designs
of the Monte Carlo studies with seeded random parameter values.
prior_state draws the whole latent configuration from the priors of a chain
config instead, and simulate_returns regenerates y from any state.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from errors import ConfigError
from gibbs import ChainConfig, active_mask, loadings_prior_draw
from model_core import LatentState, ReturnsPanel, SvParams, correlation_from_covariance, covariance_at
from samplers import RngHandle
from sv_univariate import sv_prior_draw, sv_stationary_init

logger = logging.getLogger(__name__)

Range = Tuple[float, float]


@dataclass(frozen=True)
class SimSpec:
    m: int = 10
    T: int = 1000
    r_true: int = 2
    loadings: Optional[np.ndarray] = field(default=None, compare=False)
    zero_fraction: float = 0.0
    restricted: bool = False
    loading_range: Range = (0.3, 1.5)
    mu_range: Range = (-1.0, 0.5)
    phi_range: Range = (0.85, 0.99)
    sigma_range: Range = (0.1, 0.3)
    factor_phi_range: Range = (0.9, 0.99)
    factor_sigma_range: Range = (0.1, 0.3)
    seed: int = 1

    def validate(self) -> None:
        if self.m < 1 or self.T < 2 or self.r_true < 0:
            raise ConfigError(f"need m >= 1, T >= 2, r_true >= 0, got m={self.m}, T={self.T}, r_true={self.r_true}")
        if not 0.0 <= self.zero_fraction <= 1.0:
            raise ConfigError(f"zero_fraction={self.zero_fraction} must lie in [0, 1]")
        if self.seed < 0:
            raise ConfigError(f"seed={self.seed} must be non-negative")
        for name in ("loading_range", "mu_range", "phi_range", "sigma_range", "factor_phi_range", "factor_sigma_range"):
            low, high = getattr(self, name)
            if not low <= high:
                raise ConfigError(f"{name}={getattr(self, name)} is not an interval")
        for name in ("phi_range", "factor_phi_range"):
            low, high = getattr(self, name)
            if low <= -1.0 or high >= 1.0:
                raise ConfigError(f"{name}={getattr(self, name)} must lie inside (-1, 1)")
        for name in ("sigma_range", "factor_sigma_range"):
            if getattr(self, name)[0] <= 0.0:
                raise ConfigError(f"{name}={getattr(self, name)} must be positive")
        if self.loadings is not None and np.shape(self.loadings) != (self.m, self.r_true):
            raise ConfigError(f"explicit loadings have shape {np.shape(self.loadings)}, expected ({self.m}, {self.r_true})")


@dataclass
class GroundTruth:
    data: ReturnsPanel
    loadings: np.ndarray
    factors: np.ndarray
    h_idio: np.ndarray
    h_factor: np.ndarray
    mu: np.ndarray
    phi_idio: np.ndarray
    sigma_idio: np.ndarray
    phi_factor: np.ndarray
    sigma_factor: np.ndarray
    spec: SimSpec

    def covariance(self, t: int) -> np.ndarray:
        """True Sigma_t, t in 1..T."""
        return covariance_at(self.loadings, self.h_factor[:, t], self.h_idio[:, t]).sigma

    @cached_property
    def correlation_series(self) -> np.ndarray:
        return np.stack([correlation_from_covariance(self.covariance(t)) for t in range(1, self.data.T + 1)])


def random_loadings(gen: np.random.Generator, spec: SimSpec) -> np.ndarray:
    """Random signed loadings with exactly round(zero_fraction * active cells) zeros."""
    mask = active_mask(spec.m, spec.r_true, spec.restricted)
    low, high = spec.loading_range
    values = gen.uniform(low, high, size=mask.shape) * gen.choice([-1.0, 1.0], size=mask.shape)
    values[~mask] = 0.0
    active = np.flatnonzero(mask)
    n_zero = int(round(spec.zero_fraction * active.size))
    if n_zero:
        values.flat[gen.choice(active, size=n_zero, replace=False)] = 0.0
    return values


def _ar1_paths(rng: RngHandle, mu, phi, sigma, T: int, has_level: bool = True) -> np.ndarray:
    """Stationary AR(1) log-variance paths h_0..h_T, one row per process."""
    gen = rng.generator
    n = phi.shape[0]
    h = np.empty((n, T + 1))
    for i in range(n):
        h[i, 0] = sv_stationary_init(rng, SvParams(mu=float(mu[i]), phi=float(phi[i]), sigma=float(sigma[i])), has_level)
    for t in range(1, T + 1):
        h[:, t] = mu + phi * (h[:, t - 1] - mu) + sigma * gen.standard_normal(n)
    return h


def simulate_fsv(spec: SimSpec) -> GroundTruth:
    """Draw parameters, latent paths and data; bit-identical for a given spec."""
    spec.validate()
    rng = RngHandle(seed=spec.seed)
    gen = rng.generator
    m, T, r = spec.m, spec.T, spec.r_true

    loadings = np.array(spec.loadings, dtype=float) if spec.loadings is not None else random_loadings(gen, spec)
    mu = gen.uniform(*spec.mu_range, size=m)
    phi_i = gen.uniform(*spec.phi_range, size=m)
    sigma_i = gen.uniform(*spec.sigma_range, size=m)
    phi_f = gen.uniform(*spec.factor_phi_range, size=r)
    sigma_f = gen.uniform(*spec.factor_sigma_range, size=r)

    h_idio = _ar1_paths(rng, mu, phi_i, sigma_i, T)
    h_factor = _ar1_paths(rng, np.zeros(r), phi_f, sigma_f, T, has_level=False)
    factors = np.exp(0.5 * h_factor[:, 1:]) * gen.standard_normal((r, T))
    y = loadings @ factors + np.exp(0.5 * h_idio[:, 1:]) * gen.standard_normal((m, T))

    logger.info(f"Simulated factor SV panel: m={m}, T={T}, r_true={r}, zeros={int(np.sum(loadings == 0.0))}")
    return GroundTruth(
        data=ReturnsPanel(values=y),
        loadings=loadings,
        factors=factors,
        h_idio=h_idio,
        h_factor=h_factor,
        mu=mu,
        phi_idio=phi_i,
        sigma_idio=sigma_i,
        phi_factor=phi_f,
        sigma_factor=sigma_f,
        spec=spec,
    )


# series 9 (index 8) loads on nothing; two more structural zeros
SMALL_ZERO_ROW = 8
SMALL_EXTRA_ZEROS = ((3, 1), (6, 0))


def fixture_small(seed: int = 1, T: int = 1000) -> GroundTruth:
    """Ten series, two factors, zeros above the diagonal and a full zero row."""
    gen = RngHandle(seed=seed, stream_id=1).generator
    base = SimSpec(m=10, T=T, r_true=2, restricted=True, seed=seed)
    loadings = random_loadings(gen, base)
    loadings[SMALL_ZERO_ROW] = 0.0
    for i, j in SMALL_EXTRA_ZEROS:
        loadings[i, j] = 0.0
    return simulate_fsv(SimSpec(m=10, T=T, r_true=2, loadings=loadings, restricted=True, seed=seed))


def fixture_large(seed: int = 1, T: int = 1000) -> GroundTruth:
    """A hundred series, ten factors, 43.8% structural zeros, unrestricted."""
    return simulate_fsv(SimSpec(m=100, T=T, r_true=10, zero_fraction=0.438, seed=seed))


def true_correlation_series(truth: GroundTruth) -> np.ndarray:
    """T x m x m true correlations (computed once per GroundTruth)."""
    return truth.correlation_series


def zero_correlation_pairs(loadings: np.ndarray) -> list:
    """Pairs (i < j) that share no factor, so their correlation is zero at every t."""
    lam = np.asarray(loadings, dtype=float)
    m = lam.shape[0]
    shared = np.abs(lam) @ np.abs(lam).T
    return [(i, j) for i in range(m) for j in range(i + 1, m) if shared[i, j] == 0.0]


def prior_state(rng: RngHandle, m: int, T: int, cfg: ChainConfig) -> LatentState:
    """A complete latent configuration drawn from the priors of a chain config."""
    cfg.validate()
    if m < 1 or T < 1:
        raise ConfigError(f"need m >= 1 and T >= 1, got m={m}, T={T}")
    r = cfg.r
    idio = [sv_prior_draw(rng, cfg.sv_priors_idio) for _ in range(m)]
    factor = [sv_prior_draw(rng, cfg.sv_priors_factor, has_level=False) for _ in range(r)]
    mu = np.array([p.mu for p in idio])
    phi_i, sigma_i = np.array([p.phi for p in idio]), np.array([p.sigma for p in idio])
    phi_f = np.array([p.phi for p in factor], dtype=float)
    sigma_f = np.array([p.sigma for p in factor], dtype=float)
    loadings, shrinkage = loadings_prior_draw(rng, m, r, cfg.loadings_prior, cfg.restricted_loadings)

    h_idio = _ar1_paths(rng, mu, phi_i, sigma_i, T)
    h_factor = _ar1_paths(rng, np.zeros(r), phi_f, sigma_f, T, has_level=False)
    if cfg.fixed_factors is not None:
        factors = np.array(cfg.fixed_factors, dtype=float, copy=True)
    else:
        factors = np.exp(0.5 * h_factor[:, 1:]) * rng.generator.standard_normal((r, T))
    return LatentState(
        loadings=loadings,
        factors=factors,
        h_idio=h_idio,
        h_factor=h_factor,
        mu=mu,
        phi_idio=phi_i,
        sigma_idio=sigma_i,
        phi_factor=phi_f,
        sigma_factor=sigma_f,
        tau2=shrinkage.tau2,
        lambda2=shrinkage.lambda2,
    )


def simulate_returns(rng: RngHandle, state: LatentState) -> ReturnsPanel:
    """y_t = Lambda f_t + eps_t given the factors and idiosyncratic log-variances of a state."""
    m, T = state.m, state.T
    noise = np.exp(0.5 * state.h_idio[:, 1:]) * rng.generator.standard_normal((m, T))
    return ReturnsPanel(values=state.loadings @ state.factors + noise)
