"""
Factor SV Posterior Sampler

Gibbs sweep for the factor stochastic volatility model with Normal-Gamma
shrinkage on the loadings. The sweep runs, in this order:

1. m idiosyncratic and r factor univariate SV updates (sv_univariate.sv_update)
2a. row-wise global-local shrinkage update, or
2b. column-wise global-local shrinkage update (skipped for a fixed Gaussian prior)
3. loadings, one Bayesian regression per row
3*. optional interweaving moves registered through register_interweaving_move
4. factors, one Bayesian regression per time point (skipped for observed factors)

Every update site (series, factor, sweep scaffold) owns its own random stream,
so serial and threaded execution produce identical draws.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from draw_store import DrawStore, fingerprint_data
from errors import ConfigError, ContractViolation, FsvError, NumericalError, SweepError
from model_core import LatentState, LoadingsMatrix, ReturnsPanel, cholesky_with_jitter, clamp_logvar
from samplers import (
    GIG_FLOOR,
    GigParams,
    RngHandle,
    derive_streams,
    sample_gamma,
    sample_gig,
    sample_mvn_from_precision_factor,
)
from sv_univariate import SvBlock, SvPriors, sv_update

logger = logging.getLogger(__name__)

# upper bound for prior variance draws, keeps Lambda f representable
_MAX_VARIANCE = 1e100


class PriorVariant(str, Enum):
    FIXED_GAUSSIAN = "fixed_gaussian"
    ROWWISE = "normal_gamma_rowwise"
    COLUMNWISE = "normal_gamma_columnwise"


@dataclass(frozen=True)
class LoadingsPriorConfig:
    """Loadings prior; a = 1 gives the Bayesian Lasso."""

    variant: PriorVariant = PriorVariant.ROWWISE
    tau2_fixed: float = 1.0
    a: float = 0.1
    c: float = 0.001
    d: float = 0.001

    def validate(self) -> None:
        if not isinstance(self.variant, PriorVariant):
            raise ConfigError(f"unknown loadings prior variant {self.variant!r}")
        if self.variant is PriorVariant.FIXED_GAUSSIAN:
            if not self.tau2_fixed > 0.0:
                raise ConfigError(f"tau2_fixed={self.tau2_fixed} must be positive")
            return
        for name in ("a", "c", "d"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"loadings prior {name}={getattr(self, name)} must be positive")


@dataclass
class ShrinkageState:
    tau2: np.ndarray
    lambda2: np.ndarray


@dataclass(frozen=True)
class ChainConfig:
    r: int = 3
    n_draws: int = 11000
    burn_in: int = 1000
    thin: int = 10
    restricted_loadings: bool = False
    fixed_factors: Optional[np.ndarray] = field(default=None, compare=False)
    sv_priors_idio: SvPriors = SvPriors(b_mu=0.0, B_mu=1000.0, a0=10.0, b0=2.5, B_sigma=1.0)
    sv_priors_factor: SvPriors = SvPriors(b_mu=0.0, B_mu=1000.0, a0=2.5, b0=2.5, B_sigma=1.0)
    loadings_prior: LoadingsPriorConfig = LoadingsPriorConfig()
    seed: int = 42
    workers: int = 1
    store_factors: bool = True
    progress_every: int = 1000

    def validate(self, m: Optional[int] = None, T: Optional[int] = None) -> None:
        if self.r < 0:
            raise ConfigError(f"number of factors r={self.r} must be >= 0")
        if self.thin < 1:
            raise ConfigError(f"thin={self.thin} must be >= 1")
        if not 0 <= self.burn_in < self.n_draws:
            raise ConfigError(f"need 0 <= burn_in < n_draws, got burn_in={self.burn_in}, n_draws={self.n_draws}")
        if self.seed < 0:
            raise ConfigError(f"seed={self.seed} must be non-negative")
        self.sv_priors_idio.validate()
        self.sv_priors_factor.validate()
        self.loadings_prior.validate()
        if self.fixed_factors is not None and T is not None:
            shape = np.shape(self.fixed_factors)
            if shape != (self.r, T):
                raise ConfigError(f"fixed_factors has shape {shape}, expected ({self.r}, {T})")

    def echo(self) -> Dict:
        """JSON-friendly view of the resolved configuration."""
        out = {
            "r": self.r,
            "n_draws": self.n_draws,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "restricted_loadings": self.restricted_loadings,
            "fixed_factors": None if self.fixed_factors is None else fingerprint_data(self.fixed_factors),
            "sv_priors_idio": asdict(self.sv_priors_idio),
            "sv_priors_factor": asdict(self.sv_priors_factor),
            "loadings_prior": {**asdict(self.loadings_prior), "variant": self.loadings_prior.variant.value},
            "seed": self.seed,
            "store_factors": self.store_factors,
        }
        return out


@dataclass
class SweepStreams:
    """Per-site random streams: scaffold (id 0), series 1..m, factors m+1..m+r."""

    scaffold: RngHandle
    idio: List[RngHandle]
    factor: List[RngHandle]

    @classmethod
    def from_seed(cls, seed: int, m: int, r: int) -> "SweepStreams":
        return cls(
            scaffold=RngHandle(seed=seed, stream_id=0),
            idio=derive_streams(seed, m, offset=1),
            factor=derive_streams(seed, r, offset=1 + m),
        )


def active_mask(m: int, r: int, restricted: bool) -> np.ndarray:
    """Cells of the loadings matrix that are free parameters."""
    if restricted:
        return np.tril(np.ones((m, r), dtype=bool))
    return np.ones((m, r), dtype=bool)


def _loadings_array(loadings) -> np.ndarray:
    return loadings.entries if isinstance(loadings, LoadingsMatrix) else np.asarray(loadings, dtype=float)


def _draw_tau2(rng: RngHandle, a: float, global2: float, loading: float) -> float:
    return sample_gig(rng, GigParams(p=a - 0.5, k=a * global2, l=max(loading * loading, GIG_FLOOR)))


def update_shrinkage_rowwise(
    rng: RngHandle, loadings, state: ShrinkageState, cfg: LoadingsPriorConfig, restricted: Optional[bool] = None
) -> ShrinkageState:
    """Step 2a: lambda_i^2 then tau_ij^2 for every row."""
    if cfg.variant is not PriorVariant.ROWWISE:
        raise ContractViolation(f"row-wise update called with variant {cfg.variant.value}")
    lam = _loadings_array(loadings)
    if restricted is None:
        restricted = isinstance(loadings, LoadingsMatrix) and loadings.restricted
    m, r = lam.shape
    tau2 = state.tau2.copy()
    lambda2 = state.lambda2.copy()
    for i in range(m):
        r_tilde = min(i + 1, r) if restricted else r
        if r_tilde == 0:
            continue
        lambda2[i] = sample_gamma(rng, cfg.c + cfg.a * r_tilde, cfg.d + 0.5 * cfg.a * tau2[i, :r_tilde].sum())
        for j in range(r_tilde):
            tau2[i, j] = _draw_tau2(rng, cfg.a, lambda2[i], lam[i, j])
    return ShrinkageState(tau2=tau2, lambda2=lambda2)


def update_shrinkage_columnwise(
    rng: RngHandle, loadings, state: ShrinkageState, cfg: LoadingsPriorConfig, restricted: Optional[bool] = None
) -> ShrinkageState:
    """Step 2b: lambda_j^2 then tau_ij^2 for every column."""
    if cfg.variant is not PriorVariant.COLUMNWISE:
        raise ContractViolation(f"column-wise update called with variant {cfg.variant.value}")
    lam = _loadings_array(loadings)
    if restricted is None:
        restricted = isinstance(loadings, LoadingsMatrix) and loadings.restricted
    m, r = lam.shape
    tau2 = state.tau2.copy()
    lambda2 = state.lambda2.copy()
    for j in range(r):
        first = j if restricted else 0
        if first >= m:
            continue
        lambda2[j] = sample_gamma(rng, cfg.c + cfg.a * (m - first), cfg.d + 0.5 * cfg.a * tau2[first:, j].sum())
        for i in range(first, m):
            tau2[i, j] = _draw_tau2(rng, cfg.a, lambda2[j], lam[i, j])
    return ShrinkageState(tau2=tau2, lambda2=lambda2)


def loadings_prior_draw(
    rng: RngHandle, m: int, r: int, cfg: LoadingsPriorConfig, restricted: bool = False
) -> Tuple[np.ndarray, ShrinkageState]:
    """Lambda, tau^2 and lambda^2 drawn from the loadings prior; inactive cells keep tau^2 = 1."""
    cfg.validate()
    mask = active_mask(m, r, restricted)
    tau2 = np.ones((m, r))
    if cfg.variant is PriorVariant.FIXED_GAUSSIAN:
        lambda2 = np.ones(m)
        tau2[mask] = cfg.tau2_fixed
    else:
        n_global = m if cfg.variant is PriorVariant.ROWWISE else r
        # small c, d or a underflow to zero; keep both levels finite and positive
        lambda2 = np.clip(np.atleast_1d(sample_gamma(rng, cfg.c, cfg.d, size=n_global)), GIG_FLOOR, _MAX_VARIANCE)
        global2 = lambda2[:, None] if cfg.variant is PriorVariant.ROWWISE else lambda2[None, :]
        # tau_ij^2 ~ Gamma(a, a * lambda^2 / 2)
        draws = rng.generator.gamma(cfg.a, 1.0, size=(m, r)) * 2.0 / (cfg.a * global2)
        draws = np.clip(np.nan_to_num(draws, posinf=_MAX_VARIANCE), GIG_FLOOR, _MAX_VARIANCE)
        tau2[mask] = draws[mask]
    loadings = np.where(mask, np.sqrt(tau2) * rng.generator.standard_normal((m, r)), 0.0)
    return loadings, ShrinkageState(tau2=tau2, lambda2=lambda2)


def sample_loadings_row(
    rng: RngHandle, i: int, factors: np.ndarray, y_row: np.ndarray, h_row: np.ndarray, psi: np.ndarray
) -> np.ndarray:
    """Step 3 for row i: N(b, B) with B = (X'X + Psi)^-1, b = B X'y~."""
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    r_tilde = psi.shape[0]
    if r_tilde == 0:
        return np.zeros(0)
    scale = np.exp(-0.5 * clamp_logvar(h_row))
    X = factors[:r_tilde].T * scale[:, None]
    y_tilde = y_row * scale
    precision = X.T @ X
    precision[np.diag_indices_from(precision)] += psi
    return sample_mvn_from_precision_factor(rng, X.T @ y_tilde, precision)


def _factor_regression(loadings: np.ndarray, y_t: np.ndarray, h_idio_t: np.ndarray, h_factor_t: np.ndarray):
    scale = np.exp(-0.5 * clamp_logvar(h_idio_t))
    X = loadings * scale[:, None]
    precision = X.T @ X
    precision[np.diag_indices_from(precision)] += np.exp(-clamp_logvar(h_factor_t))
    return precision, X.T @ (y_t * scale)


def sample_factors_at(
    rng: RngHandle, t: int, loadings, y_t: np.ndarray, h_idio_t: np.ndarray, h_factor_t: np.ndarray
) -> np.ndarray:
    """Step 4 at time t: N(b, B) with B^-1 = X_t'X_t + V_t^-1, b = B X_t'y~_t."""
    precision, rhs = _factor_regression(_loadings_array(loadings), y_t, h_idio_t, h_factor_t)
    return sample_mvn_from_precision_factor(rng, rhs, precision)


def _sample_all_factors(rng: RngHandle, loadings: np.ndarray, y: np.ndarray, h_idio: np.ndarray, h_factor: np.ndarray):
    """Step 4 for all t with batched r x r factorizations."""
    r = loadings.shape[1]
    T = y.shape[1]
    scale = np.exp(-0.5 * clamp_logvar(h_idio))  # m x T
    X = loadings[None, :, :] * scale.T[:, :, None]  # T x m x r
    precision = np.swapaxes(X, 1, 2) @ X
    precision[:, np.arange(r), np.arange(r)] += np.exp(-clamp_logvar(h_factor)).T
    rhs = np.einsum("tmi,tm->ti", X, (y * scale).T)
    z = rng.generator.standard_normal((T, r))
    if not (np.all(np.isfinite(precision)) and np.all(np.isfinite(rhs))):
        raise NumericalError("factor precision or mean has non-finite entries")
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError:
        logger.warning("Batched factor Cholesky failed, falling back to per-date factorizations")
        chol = np.stack([np.tril(cholesky_with_jitter(precision[t], what=f"factor precision t={t}")[0]) for t in range(T)])
    # f_t = L^-T (L^-1 b_t + z_t) for all t in two stacked solves
    inner = np.linalg.solve(chol, rhs[:, :, None])[:, :, 0] + z
    return np.linalg.solve(np.swapaxes(chol, 1, 2), inner[:, :, None])[:, :, 0].T


InterweavingMove = Callable[[LatentState], LatentState]
_INTERWEAVING_MOVES: List[InterweavingMove] = []


def register_interweaving_move(move: InterweavingMove) -> None:
    _INTERWEAVING_MOVES.append(move)


def clear_interweaving_moves() -> None:
    _INTERWEAVING_MOVES.clear()


def deep_interweaving_hook(state: LatentState) -> LatentState:
    """Step 3*: identity unless moves are registered."""
    for move in _INTERWEAVING_MOVES:
        state = move(state)
    return state


def _map(workers: int, fn, items):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def gibbs_sweep(streams: SweepStreams, data: ReturnsPanel, state: LatentState, cfg: ChainConfig) -> LatentState:
    """One full pass of steps 1, 2a/2b, 3, 3*, 4."""
    y = data.values
    m, T = y.shape
    r = cfg.r
    if state.loadings.shape != (m, r) or state.h_idio.shape != (m, T + 1) or state.h_factor.shape != (r, T + 1):
        raise ContractViolation(
            f"state shapes {state.loadings.shape}, {state.h_idio.shape}, {state.h_factor.shape} do not fit m={m}, T={T}, r={r}"
        )
    new = state.copy()
    restricted = cfg.restricted_loadings
    prior = cfg.loadings_prior

    # step 1
    residuals = y - new.loadings @ new.factors if r > 0 else y

    def idio_update(i: int) -> SvBlock:
        block = SvBlock(states=new.h_idio[i], params=new.idio_params(i), has_level=True)
        try:
            return sv_update(streams.idio[i], residuals[i], block, cfg.sv_priors_idio)
        except FsvError as e:
            raise SweepError(str(e), step="1", block=i) from e

    def factor_update(j: int) -> SvBlock:
        block = SvBlock(states=new.h_factor[j], params=new.factor_params(j), has_level=False)
        try:
            return sv_update(streams.factor[j], new.factors[j], block, cfg.sv_priors_factor)
        except FsvError as e:
            raise SweepError(str(e), step="1", block=m + j) from e

    for i, block in enumerate(_map(cfg.workers, idio_update, list(range(m)))):
        new.h_idio[i] = block.states
        new.mu[i], new.phi_idio[i], new.sigma_idio[i] = block.params.mu, block.params.phi, block.params.sigma
    for j, block in enumerate(_map(cfg.workers, factor_update, list(range(r)))):
        new.h_factor[j] = block.states
        new.phi_factor[j], new.sigma_factor[j] = block.params.phi, block.params.sigma

    if r == 0:
        return new

    # step 2
    shrinkage = ShrinkageState(tau2=new.tau2, lambda2=new.lambda2)
    try:
        if prior.variant is PriorVariant.ROWWISE:
            shrinkage = update_shrinkage_rowwise(streams.scaffold, new.loadings, shrinkage, prior, restricted=restricted)
        elif prior.variant is PriorVariant.COLUMNWISE:
            shrinkage = update_shrinkage_columnwise(streams.scaffold, new.loadings, shrinkage, prior, restricted=restricted)
    except FsvError as e:
        raise SweepError(str(e), step="2") from e
    new.tau2, new.lambda2 = shrinkage.tau2, shrinkage.lambda2

    # step 3
    def loadings_update(i: int) -> np.ndarray:
        r_tilde = min(i + 1, r) if restricted else r
        if prior.variant is PriorVariant.FIXED_GAUSSIAN:
            psi = np.full(r_tilde, 1.0 / prior.tau2_fixed)
        else:
            psi = 1.0 / new.tau2[i, :r_tilde]
        try:
            return sample_loadings_row(streams.idio[i], i, new.factors, y[i], new.h_idio[i, 1:], psi)
        except FsvError as e:
            raise SweepError(str(e), step="3", block=i) from e

    for i, row in enumerate(_map(cfg.workers, loadings_update, list(range(m)))):
        new.loadings[i, : row.shape[0]] = row
        new.loadings[i, row.shape[0]:] = 0.0

    # step 3*
    new = deep_interweaving_hook(new)

    # step 4
    if cfg.fixed_factors is None:
        try:
            new.factors = _sample_all_factors(streams.scaffold, new.loadings, y, new.h_idio[:, 1:], new.h_factor[:, 1:])
        except FsvError as e:
            raise SweepError(str(e), step="4") from e
    return new


def initial_state(data: ReturnsPanel, cfg: ChainConfig, rng: RngHandle) -> LatentState:
    """Neutral starting values; reproducible given the scaffold stream."""
    m, T = data.values.shape
    r = cfg.r
    loadings = rng.generator.standard_normal((m, r))
    if cfg.restricted_loadings:
        loadings = np.tril(loadings)
    if cfg.fixed_factors is not None:
        factors = np.array(cfg.fixed_factors, dtype=float, copy=True)
    else:
        factors = np.zeros((r, T))
    variance = np.maximum(np.var(data.values, axis=1), 1e-8)
    tau2_value = cfg.loadings_prior.tau2_fixed if cfg.loadings_prior.variant is PriorVariant.FIXED_GAUSSIAN else 1.0
    n_global = r if cfg.loadings_prior.variant is PriorVariant.COLUMNWISE else m
    return LatentState(
        loadings=loadings,
        factors=factors,
        h_idio=np.zeros((m, T + 1)),
        h_factor=np.zeros((r, T + 1)),
        mu=np.log(variance),
        phi_idio=np.full(m, 0.9),
        sigma_idio=np.full(m, 0.1),
        phi_factor=np.full(r, 0.9),
        sigma_factor=np.full(r, 0.1),
        tau2=np.full((m, r), tau2_value),
        lambda2=np.ones(n_global),
    )


def run_chain(data: ReturnsPanel, cfg: ChainConfig, state: Optional[LatentState] = None) -> DrawStore:
    """Run n_draws sweeps and keep every thin-th draw after burn-in."""
    m, T = data.values.shape
    cfg.validate(m, T)
    streams = SweepStreams.from_seed(cfg.seed, m, cfg.r)
    if state is None:
        state = initial_state(data, cfg, streams.scaffold)

    store = DrawStore(
        meta={"config": cfg.echo(), "data_fingerprint": fingerprint_data(data.values), "m": m, "T": T,
              "series_labels": list(data.series_labels)},
        store_factors=cfg.store_factors,
    )
    logger.info(
        f"Starting chain: m={m}, T={T}, r={cfg.r}, prior={cfg.loadings_prior.variant.value}, "
        f"draws={cfg.n_draws}, burn-in={cfg.burn_in}, thin={cfg.thin}, seed={cfg.seed}"
    )
    started = time.perf_counter()
    for iteration in range(cfg.n_draws):
        try:
            state = gibbs_sweep(streams, data, state, cfg)
        except SweepError as e:
            logger.error(f"Sweep failed at iteration {iteration}: {e}")
            raise SweepError(str(e), step=e.step, block=e.block, iteration=iteration) from e
        except FsvError as e:
            logger.error(f"Sweep failed at iteration {iteration}: {e}")
            raise SweepError(str(e), step="sweep", iteration=iteration) from e
        if iteration >= cfg.burn_in and (iteration - cfg.burn_in + 1) % cfg.thin == 0:
            store.append(state)
        if cfg.progress_every and (iteration + 1) % cfg.progress_every == 0:
            logger.info(f"Iteration {iteration + 1}/{cfg.n_draws} ({time.perf_counter() - started:.1f}s elapsed)")
    store.finalize()
    logger.info(f"Chain finished: {len(store)} draws kept in {time.perf_counter() - started:.1f}s")
    return store


def permute_series(data: ReturnsPanel, leaders: Sequence[int]) -> ReturnsPanel:
    """Move the chosen leader series (0-based, in order) to the top of the panel.

    With restricted loadings the leaders identify the factors; which series lead
    is a manual choice, typically made after an unrestricted preliminary run.
    """
    m = data.m
    leaders = list(leaders)
    if len(set(leaders)) != len(leaders) or any(not 0 <= i < m for i in leaders):
        raise ContractViolation(f"leaders {leaders} must be distinct indices in [0, {m})")
    order = leaders + [i for i in range(m) if i not in leaders]
    return ReturnsPanel(
        values=data.values[order],
        series_labels=[data.series_labels[i] for i in order],
        date_labels=list(data.date_labels),
    )
