"""
Run configuration.

Layers, later wins:

1. built-in defaults and the named prior preset
2. INI file (sections [run], [chain], [prior], [sv_idio], [sv_factor],
   [simulate], [predict], [backtest])
3. environment (.env supported): FSV_SEED, FSV_WORKERS, FSV_OUT_DIR, FSV_LOG_LEVEL

The run seed (run.seed, FSV_SEED, --seed) sets both the chain seed and the
simulation seed; [chain] seed and [simulate] seed set one of them.
4. command-line overrides, passed as {"section.key": value}
"""

import configparser
import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from dotenv import load_dotenv

from baselines_eval import DEFAULT_EWMA_ALPHAS, DEFAULT_WINDOW, TRADING_DAYS_PER_YEAR
from errors import ConfigError, FsvError
from gibbs import ChainConfig, LoadingsPriorConfig, PriorVariant
from simulate import SimSpec
from sv_univariate import SvPriors

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "ng-row"
FIXTURES = ("small", "large", "custom", "prior")

_SIM_PRIORS_IDIO = SvPriors(b_mu=0.0, B_mu=1000.0, a0=10.0, b0=2.5, B_sigma=1.0)
_SIM_PRIORS_FACTOR = SvPriors(b_mu=0.0, B_mu=1000.0, a0=2.5, b0=2.5, B_sigma=1.0)

# name -> (loadings prior, idiosyncratic SV priors, factor SV priors)
PRESETS: Dict[str, Tuple[LoadingsPriorConfig, SvPriors, SvPriors]] = {
    "gaussian": (LoadingsPriorConfig(PriorVariant.FIXED_GAUSSIAN, tau2_fixed=1.0), _SIM_PRIORS_IDIO, _SIM_PRIORS_FACTOR),
    "lasso-row": (LoadingsPriorConfig(PriorVariant.ROWWISE, a=1.0), _SIM_PRIORS_IDIO, _SIM_PRIORS_FACTOR),
    "lasso-col": (LoadingsPriorConfig(PriorVariant.COLUMNWISE, a=1.0), _SIM_PRIORS_IDIO, _SIM_PRIORS_FACTOR),
    "ng-row": (LoadingsPriorConfig(PriorVariant.ROWWISE, a=0.1), _SIM_PRIORS_IDIO, _SIM_PRIORS_FACTOR),
    "ng-col": (LoadingsPriorConfig(PriorVariant.COLUMNWISE, a=0.1), _SIM_PRIORS_IDIO, _SIM_PRIORS_FACTOR),
    "application": (
        LoadingsPriorConfig(PriorVariant.ROWWISE, a=0.1, c=1.0, d=1.0),
        SvPriors(b_mu=0.0, B_mu=100.0, a0=20.0, b0=1.5, B_sigma=1.0),
        SvPriors(b_mu=0.0, B_mu=100.0, a0=2.5, b0=2.5, B_sigma=1.0),
    ),
    "prediction": (
        LoadingsPriorConfig(PriorVariant.ROWWISE, a=0.1, c=1.0, d=1.0),
        SvPriors(b_mu=0.0, B_mu=100.0, a0=20.0, b0=2.5, B_sigma=0.1),
        SvPriors(b_mu=0.0, B_mu=100.0, a0=2.5, b0=2.5, B_sigma=0.1),
    ),
}

ENV_KEYS = {
    "FSV_SEED": "run.seed",
    "FSV_WORKERS": "chain.workers",
    "FSV_OUT_DIR": "run.out_dir",
    "FSV_LOG_LEVEL": "run.log_level",
}


@dataclass(frozen=True)
class PredictConfig:
    t_start: Optional[int] = None
    t_end: Optional[int] = None
    horizons: Tuple[int, ...] = (1,)
    method: str = "marginal"


@dataclass(frozen=True)
class BacktestConfig:
    window: int = DEFAULT_WINDOW
    alphas: Tuple[float, ...] = DEFAULT_EWMA_ALPHAS
    trading_days: int = TRADING_DAYS_PER_YEAR


@dataclass(frozen=True)
class RunConfig:
    chain: ChainConfig = ChainConfig()
    simulate: SimSpec = SimSpec()
    predict: PredictConfig = PredictConfig()
    backtest: BacktestConfig = BacktestConfig()
    preset: str = DEFAULT_PRESET
    fixture: str = "small"
    out_dir: str = "out"
    log_level: str = "INFO"

    def echo(self) -> Dict[str, Any]:
        spec = asdict(self.simulate)
        spec.pop("loadings", None)
        return {
            "preset": self.preset,
            "out_dir": self.out_dir,
            "log_level": self.log_level,
            "chain": self.chain.echo(),
            "simulate": {**spec, "fixture": self.fixture},
            "predict": asdict(self.predict),
            "backtest": asdict(self.backtest),
        }


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _int_tuple(value) -> Tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v.strip())


def _float_tuple(value) -> Tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return tuple(float(v) for v in str(value).split(",") if v.strip())


def _range(value) -> Tuple[float, float]:
    values = _float_tuple(value)
    if len(values) != 2:
        raise ValueError(f"expected 'low, high', got {value!r}")
    return values


# "section.key" -> (target, field name, converter)
_KEYS: Dict[str, Tuple[str, str, Callable]] = {
    "run.out_dir": ("run", "out_dir", str),
    "run.log_level": ("run", "log_level", lambda v: str(v).upper()),
    "chain.r": ("chain", "r", int),
    "chain.draws": ("chain", "n_draws", int),
    "chain.burnin": ("chain", "burn_in", int),
    "chain.thin": ("chain", "thin", int),
    "chain.restricted": ("chain", "restricted_loadings", _bool),
    "chain.seed": ("chain", "seed", int),
    "chain.workers": ("chain", "workers", int),
    "chain.store_factors": ("chain", "store_factors", _bool),
    "chain.progress_every": ("chain", "progress_every", int),
    "prior.variant": ("prior", "variant", PriorVariant),
    "prior.a": ("prior", "a", float),
    "prior.c": ("prior", "c", float),
    "prior.d": ("prior", "d", float),
    "prior.tau2": ("prior", "tau2_fixed", float),
    "simulate.fixture": ("run", "fixture", str),
    "simulate.m": ("simulate", "m", int),
    "simulate.t": ("simulate", "T", int),
    "simulate.r_true": ("simulate", "r_true", int),
    "simulate.zero_fraction": ("simulate", "zero_fraction", float),
    "simulate.restricted": ("simulate", "restricted", _bool),
    "simulate.seed": ("simulate", "seed", int),
    "simulate.loading_range": ("simulate", "loading_range", _range),
    "simulate.mu_range": ("simulate", "mu_range", _range),
    "simulate.phi_range": ("simulate", "phi_range", _range),
    "simulate.sigma_range": ("simulate", "sigma_range", _range),
    "simulate.factor_phi_range": ("simulate", "factor_phi_range", _range),
    "simulate.factor_sigma_range": ("simulate", "factor_sigma_range", _range),
    "predict.t_start": ("predict", "t_start", int),
    "predict.t_end": ("predict", "t_end", int),
    "predict.horizons": ("predict", "horizons", _int_tuple),
    "predict.method": ("predict", "method", str),
    "backtest.window": ("backtest", "window", int),
    "backtest.alphas": ("backtest", "alphas", _float_tuple),
    "backtest.trading_days": ("backtest", "trading_days", int),
}
# INI keys are case-insensitive, so the SV prior fields get spelled-out names
_SV_KEYS = {"mu_mean": "b_mu", "mu_var": "B_mu", "a0": "a0", "b0": "b0", "sigma_scale": "B_sigma"}
for _block in ("sv_idio", "sv_factor"):
    for _key, _name in _SV_KEYS.items():
        _KEYS[f"{_block}.{_key}"] = (_block, _name, float)


def preset_chain(name: str, base: Optional[ChainConfig] = None) -> ChainConfig:
    """Chain config with the prior hyperparameters of a named preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown prior preset {name!r}; choose from {sorted(PRESETS)}")
    prior, idio, factor = PRESETS[name]
    return replace(base or ChainConfig(), loadings_prior=prior, sv_priors_idio=idio, sv_priors_factor=factor)


def read_ini(path: str) -> Dict[str, Any]:
    """Flatten an INI file into {"section.key": raw string}."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return {f"{section}.{key.lower()}": value for section in parser.sections() for key, value in parser[section].items()}


def env_overrides(env: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    if env is None:
        load_dotenv()
        env = os.environ
    return {key: env[name] for name, key in ENV_KEYS.items() if env.get(name)}


def _apply(cfg: RunConfig, values: Mapping[str, Any], source: str) -> RunConfig:
    updates: Dict[str, Dict[str, Any]] = {}
    for raw_key, raw in values.items():
        if raw is None:
            continue
        key = raw_key.lower()
        if key == "prior.preset":
            continue
        if key == "run.seed":
            try:
                seed = int(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad value {raw!r} for {raw_key} ({source}): {e}") from e
            updates.setdefault("chain", {})["seed"] = seed
            updates.setdefault("simulate", {})["seed"] = seed
            continue
        if key not in _KEYS:
            raise ConfigError(f"unknown configuration key {raw_key!r} ({source})")
        target, name, convert = _KEYS[key]
        try:
            updates.setdefault(target, {})[name] = convert(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value {raw!r} for {raw_key} ({source}): {e}") from e

    chain = cfg.chain
    if "prior" in updates:
        chain = replace(chain, loadings_prior=replace(chain.loadings_prior, **updates["prior"]))
    if "sv_idio" in updates:
        chain = replace(chain, sv_priors_idio=replace(chain.sv_priors_idio, **updates["sv_idio"]))
    if "sv_factor" in updates:
        chain = replace(chain, sv_priors_factor=replace(chain.sv_priors_factor, **updates["sv_factor"]))
    if "chain" in updates:
        chain = replace(chain, **updates["chain"])
    return replace(
        cfg,
        chain=chain,
        simulate=replace(cfg.simulate, **updates.get("simulate", {})),
        predict=replace(cfg.predict, **updates.get("predict", {})),
        backtest=replace(cfg.backtest, **updates.get("backtest", {})),
        **updates.get("run", {}),
    )


def resolve_config(
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge all layers and validate the result."""
    overrides = dict(overrides or {})
    ini = read_ini(config_path) if config_path else {}
    preset = overrides.get("prior.preset") or ini.get("prior.preset") or DEFAULT_PRESET

    cfg = RunConfig(chain=preset_chain(preset), preset=preset)
    cfg = _apply(cfg, ini, f"file {config_path}")
    cfg = _apply(cfg, env_overrides(env), "environment")
    cfg = _apply(cfg, overrides, "command line")

    try:
        cfg.chain.validate()
        cfg.simulate.validate()
    except FsvError as e:
        raise ConfigError(str(e)) from e
    if cfg.chain.workers < 1:
        raise ConfigError(f"workers={cfg.chain.workers} must be >= 1")
    if not cfg.predict.horizons or min(cfg.predict.horizons) < 1:
        raise ConfigError(f"predict horizons {cfg.predict.horizons} must be positive")
    if cfg.predict.method not in ("marginal", "conditional"):
        raise ConfigError(f"predict method {cfg.predict.method!r} must be 'marginal' or 'conditional'")
    if any(not 0.0 <= a < 1.0 for a in cfg.backtest.alphas):
        raise ConfigError(f"EWMA alphas {cfg.backtest.alphas} must lie in [0, 1)")
    if cfg.fixture not in FIXTURES:
        raise ConfigError(f"fixture {cfg.fixture!r} must be one of {', '.join(FIXTURES)}")
    return cfg
