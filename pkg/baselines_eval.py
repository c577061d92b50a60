"""
Baseline covariance forecasts and evaluation metrics.

Competitor estimators (zero-mean convention, data already demeaned):

1. ma_covariance - sample covariance over a trailing window
2. ewma_covariance - Sigma_{t+1} = (1 - alpha) y_t y_t' + alpha Sigma_t
3. ledoit_wolf - shrinkage toward a scaled identity (scikit-learn)

Evaluation:

4. min_variance_weights / portfolio_backtest - global minimum variance portfolio
   with annualized sd, excess return over equal weights, Sharpe ratio
5. correlation_errors / relative_rmse_matrix - errors of estimated against true
   pairwise correlations
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg
from sklearn.covariance import ledoit_wolf as sk_ledoit_wolf

from errors import ContractViolation, DomainError
from model_core import ReturnsPanel
from predict import pseudo_lps
from reporting import write_table

logger = logging.getLogger(__name__)

TRADING_DAYS_PER_YEAR = 252
DEFAULT_WINDOW = 500
DEFAULT_EWMA_ALPHAS = (0.9, 0.97, 0.99)

PanelLike = Union[ReturnsPanel, np.ndarray]


@dataclass
class BacktestReport:
    annualized_sd: float
    annualized_excess_return_vs_equal_weight: float
    sharpe_ratio: Optional[float]
    daily_returns: np.ndarray
    label: str = ""
    mean_plps: Optional[float] = None


@dataclass
class CorrelationErrorReport:
    rmse: float
    mae: float
    per_series_geometric_relative: Optional[np.ndarray] = None


@dataclass
class RelativeRmse:
    ratios: np.ndarray
    per_series_geometric: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _values(data: PanelLike) -> np.ndarray:
    return data.values if isinstance(data, ReturnsPanel) else np.atleast_2d(np.asarray(data, dtype=float))


def ma_covariance(data: PanelLike, window: int, t: int) -> np.ndarray:
    """Zero-mean sample covariance of observations t-window+1..t (1-based)."""
    y = _values(data)
    if window < 1 or t < window or t > y.shape[1]:
        raise ContractViolation(f"need 1 <= window <= t <= T, got window={window}, t={t}, T={y.shape[1]}")
    block = y[:, t - window : t]
    return block @ block.T / window


def ewma_covariance(
    data: PanelLike,
    alpha: float,
    t: int,
    sigma_init: Optional[np.ndarray] = None,
    window: int = DEFAULT_WINDOW,
) -> np.ndarray:
    """Forecast for t+1 after running the recursion through observation t.

    Without sigma_init the recursion starts at observation window+1 from the
    MA covariance of the first `window` observations; with it, at observation 1.
    """
    if not 0.0 <= alpha < 1.0:
        raise DomainError(f"EWMA alpha must lie in [0, 1), got {alpha}")
    y = _values(data)
    if t < 1 or t > y.shape[1]:
        raise ContractViolation(f"need 1 <= t <= T, got t={t}, T={y.shape[1]}")
    if sigma_init is None:
        if t < window:
            raise ContractViolation(f"EWMA initialization needs t >= window={window}, got t={t}")
        sigma = ma_covariance(y, window, window)
        first = window
    else:
        sigma = np.array(sigma_init, dtype=float, copy=True)
        first = 0
    for s in range(first, t):
        sigma = (1.0 - alpha) * np.outer(y[:, s], y[:, s]) + alpha * sigma
    return sigma


def ledoit_wolf_with_shrinkage(data_window: PanelLike):
    """(shrunk covariance, shrinkage intensity) for an m x n window."""
    y = _values(data_window)
    if y.shape[1] < 2:
        raise ContractViolation(f"Ledoit-Wolf needs a window of at least 2 observations, got {y.shape[1]}")
    if not np.any(y):
        raise DomainError("Ledoit-Wolf window is all zeros")
    shrunk, shrinkage = sk_ledoit_wolf(y.T, assume_centered=True)
    return shrunk, float(shrinkage)


def ledoit_wolf(data_window: PanelLike) -> np.ndarray:
    return ledoit_wolf_with_shrinkage(data_window)[0]


def min_variance_weights(sigma_hat: np.ndarray) -> np.ndarray:
    """Sigma^-1 iota / (iota' Sigma^-1 iota); short positions allowed."""
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    try:
        factor = linalg.cho_factor(sigma_hat, lower=True, check_finite=False)
    except linalg.LinAlgError as e:
        raise DomainError(f"covariance forecast is not positive definite: {e}") from e
    w = linalg.cho_solve(factor, np.ones(sigma_hat.shape[0]), check_finite=False)
    return w / w.sum()


def portfolio_backtest(
    weight_series: np.ndarray,
    realized_returns: np.ndarray,
    trading_days_per_year: int = TRADING_DAYS_PER_YEAR,
    label: str = "",
) -> BacktestReport:
    """Both inputs are n x m (dates as rows); weights for a row use information before it."""
    w = np.atleast_2d(np.asarray(weight_series, dtype=float))
    y = np.atleast_2d(np.asarray(realized_returns, dtype=float))
    if w.shape != y.shape:
        raise ContractViolation(f"weights {w.shape} and returns {y.shape} do not match")
    if w.shape[0] < 2:
        raise ContractViolation("backtest needs at least two dates")
    daily = np.sum(w * y, axis=1)
    equal = y.mean(axis=1)
    sd = 0.0 if np.ptp(daily) == 0.0 else float(np.std(daily, ddof=1) * np.sqrt(trading_days_per_year))
    excess = float((daily.mean() - equal.mean()) * trading_days_per_year)
    sharpe = excess / sd if sd > 0.0 else None
    return BacktestReport(
        annualized_sd=sd,
        annualized_excess_return_vs_equal_weight=excess,
        sharpe_ratio=sharpe,
        daily_returns=daily,
        label=label,
    )


def _pair_values(corr: np.ndarray) -> np.ndarray:
    corr = np.asarray(corr, dtype=float)
    if corr.ndim == 2:
        corr = corr[None]
    iu = np.triu_indices(corr.shape[1], k=1)
    return corr[:, iu[0], iu[1]]


def pairwise_rmse(true_corr: np.ndarray, est_corr: np.ndarray) -> np.ndarray:
    """m x m matrix of time-averaged RMSEs per pair (diagonal zero)."""
    true_corr = np.asarray(true_corr, dtype=float)
    est_corr = np.asarray(est_corr, dtype=float)
    if true_corr.shape != est_corr.shape:
        raise ContractViolation(f"correlation series shapes differ: {true_corr.shape} vs {est_corr.shape}")
    return np.sqrt(np.mean((true_corr - est_corr) ** 2, axis=0))


def relative_rmse_matrix(true_corr: np.ndarray, est_a: np.ndarray, est_b: np.ndarray) -> RelativeRmse:
    """Pairwise RMSE ratios a / b and their per-series geometric averages."""
    rmse_a = pairwise_rmse(true_corr, est_a)
    rmse_b = pairwise_rmse(true_corr, est_b)
    m = rmse_a.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where((rmse_a == 0.0) & (rmse_b == 0.0), 1.0, rmse_a / rmse_b)
    np.fill_diagonal(ratios, np.nan)
    off = ~np.eye(m, dtype=bool)
    geometric = np.array([np.exp(np.mean(np.log(ratios[i, off[i]]))) if m > 1 else np.nan for i in range(m)])
    return RelativeRmse(ratios=ratios, per_series_geometric=geometric)


def correlation_errors(
    true_corr_series: np.ndarray, estimated_corr_series: np.ndarray, baseline_corr_series: Optional[np.ndarray] = None
) -> CorrelationErrorReport:
    """RMSE and MAE over all pairs i < j and all t (inputs T x m x m)."""
    true_corr_series = np.asarray(true_corr_series, dtype=float)
    estimated_corr_series = np.asarray(estimated_corr_series, dtype=float)
    if true_corr_series.shape != estimated_corr_series.shape:
        raise ContractViolation(
            f"correlation series shapes differ: {true_corr_series.shape} vs {estimated_corr_series.shape}"
        )
    diff = _pair_values(true_corr_series) - _pair_values(estimated_corr_series)
    if diff.size == 0:
        raise ContractViolation("correlation errors need at least two series")
    report = CorrelationErrorReport(rmse=float(np.sqrt(np.mean(diff**2))), mae=float(np.mean(np.abs(diff))))
    if baseline_corr_series is not None:
        report.per_series_geometric_relative = relative_rmse_matrix(
            true_corr_series, estimated_corr_series, baseline_corr_series
        ).per_series_geometric
    return report


Estimator = Callable[[np.ndarray], np.ndarray]


def _estimator(method: Union[str, Estimator], m: int, **params) -> Estimator:
    if callable(method):
        return method
    window = int(params.get("window", DEFAULT_WINDOW))
    if method == "ma":
        return lambda past: ma_covariance(past, window, past.shape[1])
    if method == "ledoit-wolf":
        return lambda past: ledoit_wolf(past[:, -window:])
    if method == "equal-weight":
        return lambda past: np.eye(m)
    raise ContractViolation(f"unknown baseline method {method!r}")


def rolling_baseline_forecasts(
    data: PanelLike, t_start: int, t_end: int, method: Union[str, Estimator], **params
) -> List[np.ndarray]:
    """Sigma_hat_{t+1} for t in [t_start, t_end), each built from observations 1..t only.

    `method` is "ma", "ewma", "ledoit-wolf", "equal-weight" or a callable taking
    the m x t array of past observations.
    """
    y = _values(data)
    m, T = y.shape
    if not 1 <= t_start < t_end <= T:
        raise ContractViolation(f"need 1 <= t_start < t_end <= T, got [{t_start}, {t_end}), T={T}")
    if method == "ewma":
        alpha = float(params.get("alpha", 0.97))
        window = int(params.get("window", DEFAULT_WINDOW))
        sigma = ewma_covariance(y[:, :t_start], alpha, t_start, window=window)
        out = [sigma]
        # one recursion step per origin; observation t enters the forecast for t+1
        for t in range(t_start + 1, t_end):
            sigma = (1.0 - alpha) * np.outer(y[:, t - 1], y[:, t - 1]) + alpha * sigma
            out.append(sigma)
        return out
    estimator = _estimator(method, m, **params)
    return [estimator(y[:, :t].copy()) for t in range(t_start, t_end)]


def backtest_forecasts(
    forecasts: Sequence[np.ndarray],
    data: PanelLike,
    t_start: int,
    label: str = "",
    trading_days_per_year: int = TRADING_DAYS_PER_YEAR,
    with_plps: bool = True,
) -> BacktestReport:
    """Minimum-variance backtest of forecasts[k] = Sigma_hat for observation t_start + k + 1."""
    y = _values(data)
    n = len(forecasts)
    if t_start + n > y.shape[1]:
        raise ContractViolation(f"{n} forecasts from t={t_start} run past T={y.shape[1]}")
    realized = y[:, t_start : t_start + n].T
    weights = np.stack([min_variance_weights(s) for s in forecasts])
    report = portfolio_backtest(weights, realized, trading_days_per_year, label=label)
    if with_plps:
        report.mean_plps = float(np.mean([pseudo_lps(s, realized[k]) for k, s in enumerate(forecasts)]))
    logger.info(
        f"Backtest {label or 'portfolio'}: sd={report.annualized_sd:.4f}, "
        f"excess={report.annualized_excess_return_vs_equal_weight:.4f}, sharpe={report.sharpe_ratio}"
    )
    return report


def backtest_table(reports: Sequence[BacktestReport], path: Optional[str] = None) -> pd.DataFrame:
    rows = [
        {
            "model": r.label,
            "sd": r.annualized_sd,
            "excess_return": r.annualized_excess_return_vs_equal_weight,
            "sharpe": r.sharpe_ratio,
            "plps": r.mean_plps,
        }
        for r in reports
    ]
    frame = pd.DataFrame(rows, columns=["model", "sd", "excess_return", "sharpe", "plps"])
    if path:
        write_table(frame, path)
    return frame


def correlation_error_table(reports: dict, path: Optional[str] = None) -> pd.DataFrame:
    frame = pd.DataFrame(
        [{"model": name, "rmse": r.rmse, "mae": r.mae} for name, r in reports.items()], columns=["model", "rmse", "mae"]
    )
    if path:
        write_table(frame, path)
    return frame
