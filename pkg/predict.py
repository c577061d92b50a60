"""
Out-of-sample evaluation of fitted factor SV models.

Latent log-variances are propagated forward from each posterior snapshot and the
predictive density of the realized return vector is averaged over snapshots:

- conditional: factors are drawn too, leaving m univariate Gaussian densities
- marginal: factors integrated out analytically (low-rank Gaussian density);
  the recommended evaluator

Rolling re-estimation over forecast origins produces one PlSeries per horizon,
from which cumulative log predictive Bayes factors are built.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import logsumexp

from draw_store import DrawStore
from errors import ContractViolation, DomainError, FsvError, NumericalError
from gibbs import ChainConfig, run_chain
from model_core import LOG_2PI, LatentState, ReturnsPanel, clamp_logvar, covariance_at, lowrank_gaussian_logpdf
from reporting import write_table
from samplers import RngHandle, derive_seed

logger = logging.getLogger(__name__)

# share of posterior draws allowed to fail in one marginal evaluation
MAX_FAILED_SHARE = 0.001
MIN_TRAINING_LENGTH = 10


@dataclass
class PredictiveDraw:
    h_idio_future: np.ndarray
    h_factor_future: np.ndarray
    loadings: np.ndarray
    f_future: Optional[np.ndarray] = None


@dataclass
class PlSeries:
    """Log predictive likelihoods by (1-based) date index of the evaluated observation."""

    values: List[Tuple[int, float]] = field(default_factory=list)
    horizon: int = 1
    label: str = ""
    missing: List[int] = field(default_factory=list)

    def __post_init__(self):
        dates = [d for d, _ in self.values]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ContractViolation("PlSeries dates must be strictly increasing")
        if not all(math.isfinite(v) for _, v in self.values):
            raise DomainError("PlSeries values must be finite")

    @property
    def dates(self) -> List[int]:
        return [d for d, _ in self.values]

    def as_dict(self) -> Dict[int, float]:
        return dict(self.values)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, columns=["date", "log_pl"])


@dataclass
class ForecastRecord:
    """Everything produced at one forecast origin t (training data 1..t)."""

    t: int
    log_pl: Dict[int, float] = field(default_factory=dict)
    sigma_hat: Optional[np.ndarray] = None
    failed: bool = False


@dataclass
class PredictiveGains:
    mean: float
    top: List[Tuple[int, float]]


def propagate_latents(rng: RngHandle, snapshot: LatentState, horizon: int = 1, with_factors: bool = True) -> PredictiveDraw:
    """Iterate the AR(1) log-variance laws forward from the last in-sample state."""
    if horizon < 1:
        raise ContractViolation(f"horizon must be >= 1, got {horizon}")
    phi_i = np.asarray(snapshot.phi_idio, dtype=float)
    phi_f = np.asarray(snapshot.phi_factor, dtype=float)
    if np.any(np.abs(phi_i) >= 1.0) or np.any(np.abs(phi_f) >= 1.0):
        raise ContractViolation("snapshot carries a non-stationary persistence |phi| >= 1")

    gen = rng.generator
    mu = np.asarray(snapshot.mu, dtype=float)
    h_i = np.asarray(snapshot.h_idio, dtype=float)[:, -1].copy()
    h_f = np.asarray(snapshot.h_factor, dtype=float)[:, -1].copy()
    for _ in range(horizon):
        h_i = mu + phi_i * (h_i - mu) + snapshot.sigma_idio * gen.standard_normal(h_i.shape[0])
        h_f = phi_f * h_f + snapshot.sigma_factor * gen.standard_normal(h_f.shape[0])

    f_future = None
    if with_factors:
        f_future = np.exp(0.5 * clamp_logvar(h_f)) * gen.standard_normal(h_f.shape[0])
    return PredictiveDraw(h_idio_future=h_i, h_factor_future=h_f, loadings=snapshot.loadings, f_future=f_future)


def _log_mean_exp(values: np.ndarray) -> float:
    return float(logsumexp(values) - math.log(values.shape[0]))


def predictive_likelihood_conditional(draws: Sequence[PredictiveDraw], y_obs: np.ndarray) -> float:
    """log (1/K) sum_k prod_i N(y_i; (Lambda f)_i, exp h_i)."""
    if len(draws) == 0:
        raise ContractViolation("predictive likelihood needs at least one draw")
    y = np.asarray(y_obs, dtype=float)
    logs = np.empty(len(draws))
    for k, draw in enumerate(draws):
        lam = np.asarray(draw.loadings, dtype=float)
        if lam.size and lam.shape[1] > 0:
            if draw.f_future is None:
                raise ContractViolation("conditional evaluation needs factor draws")
            mean = lam @ draw.f_future
        else:
            mean = 0.0
        h = clamp_logvar(draw.h_idio_future)
        logs[k] = -0.5 * (y.shape[0] * LOG_2PI + np.sum(h) + np.sum((y - mean) ** 2 * np.exp(-h)))
    return _log_mean_exp(logs)


def predictive_likelihood_marginal(draws: Sequence[PredictiveDraw], y_obs: np.ndarray) -> float:
    """log (1/K) sum_k N(y; 0, Lambda V Lambda' + Sigma_bar), factors integrated out."""
    if len(draws) == 0:
        raise ContractViolation("predictive likelihood needs at least one draw")
    y = np.asarray(y_obs, dtype=float)
    logs = []
    failed = 0
    for draw in draws:
        try:
            logs.append(lowrank_gaussian_logpdf(y, draw.loadings, draw.h_factor_future, draw.h_idio_future))
        except FsvError as e:
            failed += 1
            logger.warning(f"Predictive draw rejected: {e}")
    if failed and (failed > MAX_FAILED_SHARE * len(draws) or not logs):
        raise NumericalError(f"{failed} of {len(draws)} predictive draws failed")
    return _log_mean_exp(np.asarray(logs))


def draw_predictive_y(rng: RngHandle, draw: PredictiveDraw) -> np.ndarray:
    """Lambda f + eps with f ~ N(0, V), eps ~ N(0, Sigma_bar)."""
    gen = rng.generator
    lam = np.asarray(draw.loadings, dtype=float)
    h_f = clamp_logvar(draw.h_factor_future)
    h_i = clamp_logvar(draw.h_idio_future)
    f = np.exp(0.5 * h_f) * gen.standard_normal(h_f.shape[0])
    eps = np.exp(0.5 * h_i) * gen.standard_normal(h_i.shape[0])
    if lam.size == 0:
        return eps
    return lam @ f + eps


def predictive_draws(rng: RngHandle, store: DrawStore, horizon: int = 1, with_factors: bool = False) -> List[PredictiveDraw]:
    return [propagate_latents(rng, snap, horizon, with_factors) for snap in store.snapshots()]


def log_predictive_likelihood(
    rng: RngHandle, store: DrawStore, y_obs: np.ndarray, horizon: int = 1, method: str = "marginal"
) -> float:
    """PL of y_obs observed `horizon` steps after the end of the training sample."""
    if method == "marginal":
        return predictive_likelihood_marginal(predictive_draws(rng, store, horizon, False), y_obs)
    if method == "conditional":
        return predictive_likelihood_conditional(predictive_draws(rng, store, horizon, True), y_obs)
    raise ContractViolation(f"unknown predictive likelihood method {method!r}")


def predictive_covariance_mean(store: DrawStore, horizon: int = 1, rng: Optional[RngHandle] = None) -> np.ndarray:
    """Posterior predictive mean of Sigma_{T+horizon}, one propagated draw per snapshot."""
    rng = rng or RngHandle(seed=0)
    total = None
    for draw in predictive_draws(rng, store, horizon, False):
        sigma = covariance_at(draw.loadings, draw.h_factor_future, draw.h_idio_future).sigma
        total = sigma if total is None else total + sigma
    if total is None:
        raise ContractViolation("draw store is empty")
    return total / len(store)


def cumulative_log_bayes_factor(pl_a: PlSeries, pl_b: PlSeries, t1: int, t2: int) -> List[Tuple[int, float]]:
    """Running sum of log PL_t(A) - log PL_t(B) over t1 < t <= t2; positive favors A."""
    a = [(d, v) for d, v in pl_a.values if t1 < d <= t2]
    b = [(d, v) for d, v in pl_b.values if t1 < d <= t2]
    if [d for d, _ in a] != [d for d, _ in b]:
        raise ContractViolation(f"predictive likelihood series cover different dates in ({t1}, {t2}]")
    running = np.cumsum([va - vb for (_, va), (_, vb) in zip(a, b)])
    return [(d, float(v)) for (d, _), v in zip(a, running)]


def align_pl_series(pl_a: PlSeries, pl_b: PlSeries) -> Tuple[PlSeries, PlSeries, List[int]]:
    """Restrict both series to their common dates; returns the dates dropped from either side."""
    common = set(pl_a.dates) & set(pl_b.dates)
    skipped = sorted((set(pl_a.dates) | set(pl_b.dates) | set(pl_a.missing) | set(pl_b.missing)) - common)

    def keep(pl: PlSeries) -> PlSeries:
        values = [(d, v) for d, v in pl.values if d in common]
        return PlSeries(values=values, horizon=pl.horizon, label=pl.label, missing=list(skipped))

    if skipped:
        logger.warning(f"Dropping {len(skipped)} dates missing from {pl_a.label or 'A'} or {pl_b.label or 'B'}: {skipped}")
    return keep(pl_a), keep(pl_b), skipped


def log_predictive_gains(pl_a: PlSeries, pl_b: PlSeries, top: int = 10) -> PredictiveGains:
    """Average daily log PL difference and the dates with the largest gains of A over B."""
    b = pl_b.as_dict()
    diffs = [(d, v - b[d]) for d, v in pl_a.values if d in b]
    if not diffs:
        raise ContractViolation("predictive likelihood series share no dates")
    ranked = sorted(diffs, key=lambda item: item[1], reverse=True)[:top]
    return PredictiveGains(mean=float(np.mean([v for _, v in diffs])), top=ranked)


def pseudo_lps(sigma_hat: np.ndarray, y_obs: np.ndarray) -> float:
    """Gaussian plug-in log score log N(y_obs; 0, sigma_hat)."""
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    y = np.asarray(y_obs, dtype=float)
    try:
        chol, lower = linalg.cho_factor(sigma_hat, lower=True, check_finite=False)
    except linalg.LinAlgError as e:
        raise DomainError(f"covariance forecast is not positive definite: {e}") from e
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    quad = float(y @ linalg.cho_solve((chol, lower), y, check_finite=False))
    return float(-0.5 * (y.shape[0] * LOG_2PI + logdet + quad))


def _origin_config(cfg: ChainConfig, t: int) -> ChainConfig:
    fixed = None if cfg.fixed_factors is None else np.asarray(cfg.fixed_factors)[:, :t]
    return replace(cfg, seed=derive_seed(cfg.seed, t), workers=1, fixed_factors=fixed, progress_every=0)


def forecast_origin(
    data: ReturnsPanel,
    cfg: ChainConfig,
    t: int,
    horizons: Iterable[int] = (1,),
    method: str = "marginal",
    with_covariance: bool = False,
) -> ForecastRecord:
    """Fit on observations 1..t and score observations t+h for every horizon h."""
    record = ForecastRecord(t=t)
    try:
        store = run_chain(data.window(t), _origin_config(cfg, t))
        for h in sorted(horizons):
            rng = RngHandle(seed=derive_seed(cfg.seed, t, h))
            record.log_pl[h] = log_predictive_likelihood(rng, store, data.values[:, t + h - 1], h, method)
        if with_covariance:
            record.sigma_hat = predictive_covariance_mean(store, 1, RngHandle(seed=derive_seed(cfg.seed, t, 0)))
    except np.linalg.LinAlgError as e:
        error = NumericalError(f"linear algebra failure at origin t={t}: {e}")
        logger.error(f"Forecast at origin t={t} failed, marking it missing: {error}")
        record.failed = True
        record.log_pl = {}
    except FsvError as e:
        logger.error(f"Forecast at origin t={t} failed, marking it missing: {e}")
        record.failed = True
        record.log_pl = {}
    return record


def rolling_forecast_records(
    data: ReturnsPanel,
    cfg: ChainConfig,
    t_start: int,
    t_end: int,
    horizons: Iterable[int] = (1,),
    workers: int = 1,
    method: str = "marginal",
    with_covariance: bool = False,
) -> List[ForecastRecord]:
    """Expanding-window re-estimation at every origin t in [t_start, t_end)."""
    horizons = sorted(set(horizons))
    if not horizons or horizons[0] < 1:
        raise ContractViolation(f"horizons must be positive, got {horizons}")
    if t_start < MIN_TRAINING_LENGTH:
        raise ContractViolation(f"t_start={t_start} is below the minimum training length {MIN_TRAINING_LENGTH}")
    if t_end <= t_start or t_end - 1 + horizons[-1] > data.T:
        raise ContractViolation(
            f"origins [{t_start}, {t_end}) with horizon {horizons[-1]} do not fit T={data.T}"
        )
    origins = list(range(t_start, t_end))
    logger.info(f"Rolling forecast: {len(origins)} origins, horizons {horizons}, method={method}, workers={workers}")

    def job(t: int) -> ForecastRecord:
        return forecast_origin(data, cfg, t, horizons, method, with_covariance)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, origins))
    else:
        records = [job(t) for t in origins]
    n_failed = sum(r.failed for r in records)
    if n_failed:
        logger.warning(f"{n_failed} of {len(records)} forecast origins failed")
    return records


def series_from_records(records: Sequence[ForecastRecord], horizons: Iterable[int], label: str = "") -> Dict[int, PlSeries]:
    out = {}
    for h in sorted(set(horizons)):
        values = [(rec.t + h, rec.log_pl[h]) for rec in records if h in rec.log_pl]
        missing = [rec.t + h for rec in records if h not in rec.log_pl]
        out[h] = PlSeries(values=values, horizon=h, label=label, missing=missing)
    return out


def rolling_forecast(
    data: ReturnsPanel,
    cfg: ChainConfig,
    t_start: int,
    t_end: int,
    horizons: Iterable[int] = (1,),
    workers: int = 1,
    method: str = "marginal",
) -> Dict[int, PlSeries]:
    horizons = sorted(set(horizons))
    records = rolling_forecast_records(data, cfg, t_start, t_end, horizons, workers, method)
    return series_from_records(records, horizons, label=f"r={cfg.r}")


def write_pl_series(series: PlSeries, path: str) -> str:
    return write_table(series.to_frame(), path)


def write_bf_table(bf: Sequence[Tuple[int, float]], path: str) -> str:
    return write_table(pd.DataFrame(list(bf), columns=["date", "cumulative_log_bf"]), path)
