"""
Command-line entry point.

    python cli.py simulate --fixture small --out out/sim
    python cli.py fit --data out/sim/returns.csv --factors 3 --prior ng-row --out out/fit
    python cli.py evaluate --truth out/sim/truth --store out/fit/draws --out out/eval
    python cli.py predict --data out/sim/returns.csv --t-start 1000 --t-end 1500 --factors 2
    python cli.py backtest --data returns.csv --t-start 1000 --t-end 1500
    python cli.py plotdata --store out/fit/draws --out out/plots
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from baselines_eval import (
    backtest_forecasts,
    backtest_table,
    correlation_error_table,
    correlation_errors,
    pairwise_rmse,
    rolling_baseline_forecasts,
)
from config import FIXTURES, PRESETS, RunConfig, resolve_config
from draw_store import (
    DrawStore,
    logdet_traces,
    posterior_communality_path,
    posterior_correlation_path,
    posterior_correlation_summary,
)
from errors import ContractViolation, FsvError
from gibbs import permute_series, run_chain
from model_core import LatentState
from predict import (
    align_pl_series,
    cumulative_log_bayes_factor,
    log_predictive_gains,
    rolling_forecast_records,
    series_from_records,
    write_bf_table,
    write_pl_series,
)
from reporting import matrix_frame, paths_frame, write_table
from returns_data import load_factor_csv, load_returns_csv, write_returns_csv
from samplers import RngHandle
from simulate import (
    GroundTruth,
    fixture_large,
    fixture_small,
    prior_state,
    simulate_fsv,
    simulate_returns,
    zero_correlation_pairs,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--factors", type=int, help="number of latent factors r")
    common.add_argument("--prior", choices=sorted(PRESETS), help="prior preset")
    common.add_argument("--a", type=float, help="shrinkage parameter a")
    common.add_argument("--c", type=float, help="global shrinkage shape c")
    common.add_argument("--d", type=float, help="global shrinkage rate d")
    common.add_argument("--draws", type=int, help="total MCMC iterations")
    common.add_argument("--burnin", type=int)
    common.add_argument("--thin", type=int)
    common.add_argument("--restricted", action="store_true", default=None, help="zero loadings above the diagonal")
    common.add_argument("--fixed-factors", help="CSV of observed factors; skips the factor draw")
    common.add_argument("--store-factors", action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--horizons", help="comma-separated forecast horizons")
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="fsv", description="Factor stochastic volatility toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a ground-truth panel")
    p.add_argument("--fixture", choices=list(FIXTURES))

    p = sub.add_parser("fit", parents=[common], help="run the Gibbs sampler on a returns CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--demean", action="store_true")
    p.add_argument("--leaders", help="comma-separated 0-based series moved to the top before fitting")

    p = sub.add_parser("predict", parents=[common], help="rolling predictive likelihoods and Bayes factors")
    p.add_argument("--data", required=True)
    p.add_argument("--demean", action="store_true")
    p.add_argument("--t-start", type=int)
    p.add_argument("--t-end", type=int)
    p.add_argument("--baseline-factors", type=int, default=0, help="factor count of the comparison model")
    p.add_argument("--method", choices=["marginal", "conditional"])

    p = sub.add_parser("backtest", parents=[common], help="minimum variance portfolio backtest")
    p.add_argument("--data", required=True)
    p.add_argument("--demean", action="store_true")
    p.add_argument("--t-start", type=int)
    p.add_argument("--t-end", type=int)
    p.add_argument("--with-model", action="store_true", help="also backtest the factor SV model (slow)")

    p = sub.add_parser("evaluate", parents=[common], help="compare a draw store with simulated truth")
    p.add_argument("--truth", required=True, help="truth directory written by simulate")
    p.add_argument("--store", required=True, help="draw store directory written by fit")

    p = sub.add_parser("plotdata", parents=[common], help="emit plot-ready tables from a draw store")
    p.add_argument("--store", required=True)
    p.add_argument("--t", type=int, help="date index for correlation snapshots (default T)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict:
    return {
        "prior.preset": args.prior,
        "prior.a": args.a,
        "prior.c": args.c,
        "prior.d": args.d,
        "run.seed": args.seed,
        "chain.r": args.factors,
        "chain.draws": args.draws,
        "chain.burnin": args.burnin,
        "chain.thin": args.thin,
        "chain.restricted": args.restricted,
        "chain.store_factors": args.store_factors,
        "chain.workers": args.workers,
        "predict.horizons": args.horizons,
        "predict.t_start": getattr(args, "t_start", None),
        "predict.t_end": getattr(args, "t_end", None),
        "predict.method": getattr(args, "method", None),
        "simulate.fixture": getattr(args, "fixture", None),
        "run.out_dir": args.out,
        "run.log_level": args.log_level,
    }


def _echo(cfg: RunConfig, command: str) -> None:
    echo = cfg.echo()
    seed = cfg.simulate.seed if command == "simulate" else cfg.chain.seed
    logger.info(f"Command {command} with seed {seed}, resolved config: {json.dumps(echo, sort_keys=True)}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config_echo.json"), "w") as f:
        json.dump({"command": command, **echo}, f, indent=2, sort_keys=True)


def _with_fixed_factors(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if not args.fixed_factors:
        return cfg
    factors = load_factor_csv(args.fixed_factors)
    return replace(cfg, chain=replace(cfg.chain, r=factors.shape[0], fixed_factors=factors))


def truth_state(truth: GroundTruth) -> LatentState:
    m, r = truth.loadings.shape
    return LatentState(
        loadings=truth.loadings,
        factors=truth.factors,
        h_idio=truth.h_idio,
        h_factor=truth.h_factor,
        mu=truth.mu,
        phi_idio=truth.phi_idio,
        sigma_idio=truth.sigma_idio,
        phi_factor=truth.phi_factor,
        sigma_factor=truth.sigma_factor,
        tau2=np.ones((m, r)),
        lambda2=np.ones(m),
    )


def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.fixture == "prior":
        # parameters, loadings and paths drawn from the chain priors
        state = prior_state(RngHandle(seed=cfg.simulate.seed), cfg.simulate.m, cfg.simulate.T, cfg.chain)
        data = simulate_returns(RngHandle(seed=cfg.simulate.seed, stream_id=1), state)
        write_returns_csv(data, os.path.join(cfg.out_dir, "returns.csv"))
        store = DrawStore(meta={"kind": "truth", "fixture": cfg.fixture, "seed": cfg.simulate.seed})
        store.append(state)
        store.finalize().save(os.path.join(cfg.out_dir, "truth"))
        return 0
    if cfg.fixture == "small":
        truth = fixture_small(cfg.simulate.seed, T=cfg.simulate.T)
    elif cfg.fixture == "large":
        truth = fixture_large(cfg.simulate.seed, T=cfg.simulate.T)
    else:
        truth = simulate_fsv(cfg.simulate)
    write_returns_csv(truth.data, os.path.join(cfg.out_dir, "returns.csv"))
    store = DrawStore(meta={"kind": "truth", "fixture": cfg.fixture, "seed": cfg.simulate.seed})
    store.append(truth_state(truth))
    store.finalize().save(os.path.join(cfg.out_dir, "truth"))
    return 0


def cmd_fit(cfg: RunConfig, args: argparse.Namespace) -> int:
    data = load_returns_csv(args.data, demean=args.demean)
    if args.leaders:
        data = permute_series(data, [int(i) for i in args.leaders.split(",")])
    store = run_chain(data, cfg.chain)
    store.save(os.path.join(cfg.out_dir, "draws"))
    return 0


def _origins(cfg: RunConfig, T: int) -> tuple:
    t_start = cfg.predict.t_start
    if t_start is None:
        raise ContractViolation("--t-start is required")
    t_end = cfg.predict.t_end if cfg.predict.t_end is not None else T - max(cfg.predict.horizons) + 1
    return t_start, t_end


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    data = load_returns_csv(args.data, demean=args.demean)
    t_start, t_end = _origins(cfg, data.T)
    horizons = cfg.predict.horizons
    if cfg.chain.r == args.baseline_factors:
        raise ContractViolation(f"--factors and --baseline-factors are both {cfg.chain.r}; nothing to compare")
    models = {f"r{cfg.chain.r}": cfg.chain, f"r{args.baseline_factors}": replace(cfg.chain, r=args.baseline_factors)}
    series = {}
    for name, chain in models.items():
        records = rolling_forecast_records(
            data, chain, t_start, t_end, horizons, workers=cfg.chain.workers, method=cfg.predict.method
        )
        series[name] = series_from_records(records, horizons, label=name)
        for h, pl in series[name].items():
            write_pl_series(pl, os.path.join(cfg.out_dir, f"pl_{name}_h{h}.csv"))

    name_a, name_b = list(models)
    for h in horizons:
        pl_a, pl_b, skipped = align_pl_series(series[name_a][h], series[name_b][h])
        write_table(pd.DataFrame({"date": skipped}), os.path.join(cfg.out_dir, f"skipped_dates_h{h}.csv"))
        bf = cumulative_log_bayes_factor(pl_a, pl_b, t_start, t_end - 1 + h)
        write_bf_table(bf, os.path.join(cfg.out_dir, f"bf_{name_a}_vs_{name_b}_h{h}.csv"))
        if bf:
            gains = log_predictive_gains(pl_a, pl_b)
            logger.info(f"Horizon {h}: final log BF {name_a} vs {name_b} = {bf[-1][1]:.3f}, mean daily gain {gains.mean:.4f}")
    return 0


def cmd_backtest(cfg: RunConfig, args: argparse.Namespace) -> int:
    data = load_returns_csv(args.data, demean=args.demean)
    t_start, t_end = _origins(cfg, data.T)
    bt = cfg.backtest
    reports = []

    def run(label: str, forecasts: List[np.ndarray], with_plps: bool = True):
        reports.append(backtest_forecasts(forecasts, data, t_start, label, bt.trading_days, with_plps))

    run("equal-weight", rolling_baseline_forecasts(data, t_start, t_end, "equal-weight"), with_plps=False)
    run(f"ma{bt.window}", rolling_baseline_forecasts(data, t_start, t_end, "ma", window=bt.window))
    for alpha in bt.alphas:
        run(f"ewma{alpha}", rolling_baseline_forecasts(data, t_start, t_end, "ewma", alpha=alpha, window=bt.window))
    run("ledoit-wolf", rolling_baseline_forecasts(data, t_start, t_end, "ledoit-wolf", window=bt.window))
    if args.with_model:
        records = rolling_forecast_records(
            data, cfg.chain, t_start, t_end, (1,), workers=cfg.chain.workers, with_covariance=True
        )
        if any(rec.failed for rec in records):
            raise ContractViolation("factor SV forecasts failed at some origins; backtest needs every date")
        run(f"fsv-r{cfg.chain.r}", [rec.sigma_hat for rec in records])
    backtest_table(reports, os.path.join(cfg.out_dir, "backtest.csv"))
    return 0


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    truth = DrawStore.load(args.truth)
    store = DrawStore.load(args.store)
    if (truth.m, truth.T) != (store.m, store.T):
        raise ContractViolation(f"truth is {truth.m} x {truth.T} but the draws are {store.m} x {store.T}")
    true_corr = posterior_correlation_path(truth)
    est_corr = posterior_correlation_path(store)
    report = correlation_errors(true_corr, est_corr)
    logger.info(f"Correlation errors: RMSE={report.rmse:.5f}, MAE={report.mae:.5f}")
    correlation_error_table({"model": report}, os.path.join(cfg.out_dir, "correlation_errors.csv"))
    pair_rmse = pairwise_rmse(true_corr, est_corr)
    write_table(matrix_frame(pair_rmse), os.path.join(cfg.out_dir, "pairwise_rmse.csv"))
    zero_pairs = zero_correlation_pairs(truth.arrays["loadings"][0])
    write_table(
        pd.DataFrame(
            [{"i": i + 1, "j": j + 1, "rmse": pair_rmse[i, j]} for i, j in zero_pairs], columns=["i", "j", "rmse"]
        ),
        os.path.join(cfg.out_dir, "zero_pair_rmse.csv"),
    )
    if zero_pairs:
        zero_rmse = np.mean([pair_rmse[i, j] for i, j in zero_pairs])
        logger.info(f"{len(zero_pairs)} pairs without a shared factor, mean RMSE {zero_rmse:.5f}")
    per_series, joint = posterior_communality_path(store)
    frame = paths_frame(per_series.T, "communality", list(range(1, store.T + 1)))
    frame["joint"] = joint
    write_table(frame, os.path.join(cfg.out_dir, "communalities.csv"))
    return 0


def cmd_plotdata(cfg: RunConfig, args: argparse.Namespace) -> int:
    store = DrawStore.load(args.store)
    labels = store.meta.get("series_labels")
    t = args.t if args.t is not None else store.T
    out = cfg.out_dir

    lam = store.arrays["loadings"]
    columns = [f"l_{i + 1}_{j + 1}" for i in range(store.m) for j in range(store.r)]
    write_table(pd.DataFrame(lam.reshape(len(store), -1), columns=columns), os.path.join(out, "loadings_draws.csv"))
    for name in ("h_idio", "h_factor"):
        paths = store.arrays[name]
        if paths.shape[1] == 0:
            continue
        write_table(paths_frame(paths.mean(axis=0), f"{name}_mean"), os.path.join(out, f"{name}_mean.csv"))
        lower, upper = np.quantile(paths, [0.05, 0.95], axis=0)
        write_table(paths_frame(lower, f"{name}_q05"), os.path.join(out, f"{name}_q05.csv"))
        write_table(paths_frame(upper, f"{name}_q95"), os.path.join(out, f"{name}_q95.csv"))
    mean, sd = posterior_correlation_summary(store, t)
    write_table(matrix_frame(mean, labels), os.path.join(out, f"correlation_mean_t{t}.csv"))
    write_table(matrix_frame(sd, labels), os.path.join(out, f"correlation_sd_t{t}.csv"))
    logdet_cov, logdet_corr = logdet_traces(store, t)
    write_table(
        pd.DataFrame({"draw": np.arange(1, len(store) + 1), "logdet_cov": logdet_cov, "logdet_corr": logdet_corr}),
        os.path.join(out, f"logdet_traces_t{t}.csv"),
    )
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "backtest": cmd_backtest,
    "evaluate": cmd_evaluate,
    "plotdata": cmd_plotdata,
}


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse, configure, run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = resolve_config(args.config, _overrides(args))
        logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, cfg.log_level, logging.INFO))
        cfg = _with_fixed_factors(cfg, args)
        _echo(cfg, args.command)
        return COMMANDS[args.command](cfg, args)
    except FsvError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
