"""
Random variate generation for the Gibbs sweep.

All samplers take an RngHandle, a seeded numpy Generator bound to one logical
update site. Gamma variates use the shape-rate convention (mean = shape / rate)
everywhere in the package.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from scipy import linalg

from errors import DomainError, NumericalError
from model_core import cholesky_with_jitter

logger = logging.getLogger(__name__)

# below this ratio the inverse coefficient is indistinguishable from zero
TINY_RATIO = 1e-300
# smallest value sample_gig ever returns
GIG_FLOOR = np.finfo(float).tiny


@dataclass
class RngHandle:
    """Seeded random stream; same (seed, stream_id) gives the same draws."""

    seed: int
    stream_id: int = 0
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise DomainError(f"seed and stream_id must be non-negative, got {self.seed}, {self.stream_id}")
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        self.generator = np.random.Generator(np.random.PCG64(sequence))


def derive_streams(seed: int, count: int, offset: int = 0) -> List[RngHandle]:
    """One handle per update site, numbered offset .. offset + count - 1."""
    return [RngHandle(seed=seed, stream_id=offset + k) for k in range(count)]


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed, e.g. one per forecast origin."""
    state = np.random.SeedSequence(entropy=[int(seed), *[int(k) for k in keys]]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])


@dataclass(frozen=True)
class GigParams:
    """GIG(p, k, l): density proportional to x^(p-1) exp(-(k x + l / x) / 2)."""

    p: float
    k: float
    l: float

    def validate(self) -> None:
        p, k, l = self.p, self.k, self.l
        if not (math.isfinite(p) and math.isfinite(k) and math.isfinite(l)) or k < 0.0 or l < 0.0:
            raise DomainError(f"invalid GIG parameters {self}")
        if k > 0.0 and l > 0.0:
            return
        if k > 0.0 and l == 0.0 and p > 0.0:
            return
        if k == 0.0 and l > 0.0 and p < 0.0:
            return
        raise DomainError(f"GIG parameters {self} outside the validity region")


def _psi(x: float, alpha: float, lam: float) -> float:
    return -alpha * (math.cosh(x) - 1.0) - lam * (math.exp(x) - x - 1.0)


def _dpsi(x: float, alpha: float, lam: float) -> float:
    return -alpha * math.sinh(x) - lam * (math.exp(x) - 1.0)


def _gig_two_parameter(gen: np.random.Generator, lam: float, omega: float) -> float:
    """Draw X with density proportional to x^(lam-1) exp(-omega (x + 1/x) / 2), lam >= 0.

    Rejection from a three-piece envelope on log X; setup cost is O(1).
    """
    alpha = math.sqrt(omega * omega + lam * lam) - lam

    x = -_psi(1.0, alpha, lam)
    if 0.5 <= x <= 2.0:
        t = 1.0
    elif x > 2.0:
        t = 1.0 if (alpha == 0.0 and lam == 0.0) else math.sqrt(2.0 / (alpha + lam))
    else:
        t = 1.0 if (alpha == 0.0 and lam == 0.0) else math.log(4.0 / (alpha + 2.0 * lam))

    x = -_psi(-1.0, alpha, lam)
    if 0.5 <= x <= 2.0:
        s = 1.0
    elif x > 2.0:
        s = 1.0 if (alpha == 0.0 and lam == 0.0) else math.sqrt(4.0 / (alpha * math.cosh(1.0) + lam))
    else:
        if alpha == 0.0 and lam == 0.0:
            s = 1.0
        elif alpha == 0.0:
            s = 1.0 / lam
        else:
            s_alpha = math.log(1.0 + 1.0 / alpha + math.sqrt(1.0 / (alpha * alpha) + 2.0 / alpha))
            s = s_alpha if lam == 0.0 else min(1.0 / lam, s_alpha)

    eta = -_psi(t, alpha, lam)
    zeta = -_dpsi(t, alpha, lam)
    theta = -_psi(-s, alpha, lam)
    xi = _dpsi(-s, alpha, lam)

    p_len = 1.0 / xi
    r_len = 1.0 / zeta
    td = t - r_len * eta
    sd = s - p_len * theta
    q_len = td + sd
    total = p_len + q_len + r_len

    while True:
        u, v, w = gen.random(3)
        if u < q_len / total:
            cand = -sd + q_len * v
        elif u < (q_len + r_len) / total:
            cand = td - r_len * math.log(v)
        else:
            cand = -sd + p_len * math.log(v)

        if cand > td:
            envelope = math.exp(-eta - zeta * (cand - t))
        elif cand < -sd:
            envelope = math.exp(-theta + xi * (cand + s))
        else:
            envelope = 1.0
        if w * envelope <= math.exp(_psi(cand, alpha, lam)):
            break

    return math.exp(cand) * (lam / omega + math.sqrt(1.0 + (lam / omega) ** 2))


def sample_gig(rng: RngHandle, params: GigParams) -> float:
    """Exact GIG(p, k, l) draw; strictly positive and finite."""
    params.validate()
    p, k, l = params.p, params.k, params.l
    gen = rng.generator

    # boundary cases and underflowing coefficients reduce to (inverse) Gamma laws
    if p > 0.0 and l <= TINY_RATIO * k:
        draw = gen.gamma(p, 2.0 / k)
    elif p < 0.0 and k <= TINY_RATIO * l:
        draw = 1.0 / gen.gamma(-p, 2.0 / l)
    else:
        omega = math.sqrt(k) * math.sqrt(l)
        if omega < 1e-150:
            # omega this small only leaves the Gamma-type limit reachable
            if p > 0.0:
                draw = gen.gamma(p, 2.0 / k)
            elif p < 0.0:
                draw = 1.0 / gen.gamma(-p, 2.0 / l)
            else:
                omega = 1e-150
                draw = _gig_two_parameter(gen, 0.0, omega) * math.sqrt(l) / math.sqrt(k)
        else:
            lam = abs(p)
            draw = _gig_two_parameter(gen, lam, omega)
            if p < 0.0:
                draw = 1.0 / draw
            draw = draw * math.sqrt(l) / math.sqrt(k)

    if not math.isfinite(draw) or draw < GIG_FLOOR:
        floored = min(max(draw, GIG_FLOOR), np.finfo(float).max) if math.isfinite(draw) else np.finfo(float).max
        logger.warning(f"GIG draw {draw!r} for {params} clipped to {floored!r}")
        draw = floored
    return float(draw)


def sample_gamma(rng: RngHandle, shape: float, rate: float, size: Optional[int] = None) -> Union[float, np.ndarray]:
    """Gamma(shape, rate) with mean shape / rate."""
    if not (shape > 0.0 and rate > 0.0):
        raise DomainError(f"Gamma needs positive shape and rate, got shape={shape}, rate={rate}")
    draw = rng.generator.gamma(shape, 1.0 / rate, size=size)
    return float(draw) if size is None else draw


def sample_beta(rng: RngHandle, a0: float, b0: float, size: Optional[int] = None) -> Union[float, np.ndarray]:
    if not (a0 > 0.0 and b0 > 0.0):
        raise DomainError(f"Beta needs positive parameters, got a0={a0}, b0={b0}")
    draw = rng.generator.beta(a0, b0, size=size)
    return float(draw) if size is None else draw


def sample_mvn_from_precision_factor(rng: RngHandle, mean_rhs: np.ndarray, precision: np.ndarray) -> np.ndarray:
    """Draw from N(P^-1 b, P^-1) with a single Cholesky factorization of P."""
    mean_rhs = np.atleast_1d(np.asarray(mean_rhs, dtype=float))
    n = mean_rhs.shape[0]
    if n == 0:
        return np.zeros(0)
    precision = np.atleast_2d(np.asarray(precision, dtype=float))
    if not (np.all(np.isfinite(precision)) and np.all(np.isfinite(mean_rhs))):
        raise NumericalError("posterior precision or mean has non-finite entries")
    chol, lower = cholesky_with_jitter(precision, what="posterior precision")
    chol = np.tril(chol)
    mean = linalg.cho_solve((chol, lower), mean_rhs, check_finite=False)
    z = rng.generator.standard_normal(n)
    return mean + linalg.solve_triangular(chol, z, lower=True, trans="T", check_finite=False)
