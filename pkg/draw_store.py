"""
Posterior draw storage.

A DrawStore holds the thinned, post-burn-in snapshots of a chain as stacked
arrays (leading axis = draw) and persists them as a directory:

    meta.json           config echo, data fingerprint, array shapes
    <quantity>.f8       little-endian float64, row-major

Also provides posterior summaries computed from a store.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ContractViolation, ParseError
from model_core import LatentState, clamp_logvar

logger = logging.getLogger(__name__)

META_FILE = "meta.json"
ARRAY_SUFFIX = ".f8"
QUANTITIES = (
    "loadings",
    "factors",
    "h_idio",
    "h_factor",
    "mu",
    "phi_idio",
    "sigma_idio",
    "phi_factor",
    "sigma_factor",
    "tau2",
    "lambda2",
)


def fingerprint_arrays(arrays: Dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        values = np.ascontiguousarray(arrays[name], dtype="<f8")
        digest.update(name.encode())
        digest.update(str(values.shape).encode())
        digest.update(values.tobytes())
    return digest.hexdigest()


def fingerprint_data(values: np.ndarray) -> str:
    return fingerprint_arrays({"data": np.asarray(values, dtype=float)})


@dataclass
class DrawStore:
    """Thinned posterior sample {kappa^(k)} plus metadata."""

    meta: Dict = field(default_factory=dict)
    store_factors: bool = True
    _buffers: Dict[str, List[np.ndarray]] = field(default_factory=lambda: {q: [] for q in QUANTITIES}, repr=False)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def append(self, state: LatentState) -> None:
        if self.arrays:
            raise ContractViolation("cannot append to a finalized DrawStore")
        state.log_variances  # rejects non-finite paths
        for name in QUANTITIES:
            if name == "factors" and not self.store_factors:
                continue
            self._buffers[name].append(np.array(getattr(state, name), dtype=float, copy=True))

    def finalize(self) -> "DrawStore":
        for name, items in self._buffers.items():
            if items:
                self.arrays[name] = np.stack(items)
        self._buffers = {q: [] for q in QUANTITIES}
        self.meta["n_snapshots"] = len(self)
        self.meta["shapes"] = {name: list(values.shape) for name, values in self.arrays.items()}
        self.meta["fingerprint"] = self.fingerprint()
        return self

    def __len__(self) -> int:
        if self.arrays:
            return int(self.arrays["loadings"].shape[0])
        return len(self._buffers["loadings"])

    @property
    def m(self) -> int:
        return int(self.arrays["loadings"].shape[1])

    @property
    def r(self) -> int:
        return int(self.arrays["loadings"].shape[2])

    @property
    def T(self) -> int:
        return int(self.arrays["h_idio"].shape[2]) - 1

    def snapshot(self, k: int) -> LatentState:
        values = {name: self.arrays[name][k] for name in QUANTITIES if name in self.arrays}
        if "factors" not in values:
            values["factors"] = np.zeros((self.r, 0))
        return LatentState(**values)

    def snapshots(self):
        for k in range(len(self)):
            yield self.snapshot(k)

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.arrays)

    def save(self, directory: str) -> str:
        """Write meta.json plus one flat binary file per quantity."""
        if not self.arrays:
            self.finalize()
        os.makedirs(directory, exist_ok=True)
        for name, values in self.arrays.items():
            np.ascontiguousarray(values, dtype="<f8").tofile(os.path.join(directory, name + ARRAY_SUFFIX))
        meta = dict(self.meta)
        meta["store_factors"] = self.store_factors
        with open(os.path.join(directory, META_FILE), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        logger.info(f"Saved {len(self)} draws to {directory} (fingerprint {meta['fingerprint'][:12]})")
        return directory

    @classmethod
    def load(cls, directory: str) -> "DrawStore":
        meta_path = os.path.join(directory, META_FILE)
        if not os.path.exists(meta_path):
            raise ParseError(f"no {META_FILE} in draw directory {directory}")
        with open(meta_path, "r") as f:
            meta = json.load(f)
        arrays = {}
        for name, shape in meta.get("shapes", {}).items():
            path = os.path.join(directory, name + ARRAY_SUFFIX)
            values = np.fromfile(path, dtype="<f8")
            if values.size != int(np.prod(shape)):
                raise ParseError(f"{path} holds {values.size} values, metadata declares shape {shape}")
            arrays[name] = values.reshape(shape)
        store = cls(meta=meta, store_factors=bool(meta.get("store_factors", True)), arrays=arrays)
        if store.fingerprint() != meta.get("fingerprint"):
            raise ParseError(f"fingerprint mismatch in {directory}")
        logger.info(f"Loaded {len(store)} draws from {directory}")
        return store


def posterior_covariance_draws(store: DrawStore, t: int) -> np.ndarray:
    """K x m x m covariance draws at time t (1..T)."""
    lam = store.arrays["loadings"]
    hf = clamp_logvar(store.arrays["h_factor"][:, :, t])
    hi = clamp_logvar(store.arrays["h_idio"][:, :, t])
    cov = np.einsum("kir,kr,kjr->kij", lam, np.exp(hf), lam)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    idx = np.arange(cov.shape[1])
    cov[:, idx, idx] += np.exp(hi)
    return cov


def _correlations(cov: np.ndarray) -> np.ndarray:
    s = 1.0 / np.sqrt(np.diagonal(cov, axis1=1, axis2=2))
    corr = np.clip(cov * s[:, :, None] * s[:, None, :], -1.0, 1.0)
    idx = np.arange(cov.shape[1])
    corr[:, idx, idx] = 1.0
    return corr


def posterior_correlation_summary(store: DrawStore, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation of the correlation matrix at t."""
    corr = _correlations(posterior_covariance_draws(store, t))
    return corr.mean(axis=0), corr.std(axis=0)


def posterior_correlation_path(store: DrawStore, pairs: Optional[List[Tuple[int, int]]] = None) -> np.ndarray:
    """Posterior mean correlations for every t, shape T x m x m (or T x len(pairs))."""
    means = np.stack([posterior_correlation_summary(store, t)[0] for t in range(1, store.T + 1)])
    if pairs is None:
        return means
    return np.stack([means[:, i, j] for i, j in pairs], axis=1)


def logdet_traces(store: DrawStore, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-draw log det of the covariance and of the correlation matrix at t."""
    cov = posterior_covariance_draws(store, t)
    logdet_cov = np.linalg.slogdet(cov)[1]
    logdet_corr = logdet_cov - np.sum(np.log(np.diagonal(cov, axis1=1, axis2=2)), axis=1)
    return logdet_cov, logdet_corr


def batch_means_mcse(series: np.ndarray, n_batches: int = 20) -> float:
    """Monte Carlo standard error of the mean of a (correlated) chain by batch means."""
    series = np.asarray(series, dtype=float).reshape(-1)
    n = series.shape[0]
    if n < 2:
        raise ContractViolation("batch means need at least two draws")
    n_batches = max(2, min(n_batches, n))
    size = n // n_batches
    batches = series[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(np.std(batches, ddof=1) / np.sqrt(n_batches))


def posterior_communality_path(store: DrawStore) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean communalities for every t: (T x m per series, length-T joint)."""
    lam2 = store.arrays["loadings"] ** 2
    per_series = []
    for t in range(1, store.T + 1):
        common = np.einsum("kir,kr->ki", lam2, np.exp(clamp_logvar(store.arrays["h_factor"][:, :, t])))
        idio = np.exp(clamp_logvar(store.arrays["h_idio"][:, :, t]))
        per_series.append(np.mean(common / (common + idio), axis=0))
    per_series = np.stack(per_series)
    return per_series, per_series.mean(axis=1)
