from types import SimpleNamespace

from scipy import stats

import numpy as np
import pytest

from errors import ContractViolation, DomainError
from model_core import SvParams
from samplers import RngHandle
from draw_store import batch_means_mcse
from sv_univariate import SvBlock, SvPriors, sv_prior_draw, sv_stationary_init, sv_update


def simulate_sv(T, mu, phi, sigma, seed=0):
    gen = np.random.default_rng(seed)
    h = np.empty(T + 1)
    h[0] = mu + sigma / np.sqrt(1 - phi**2) * gen.standard_normal()
    for t in range(1, T + 1):
        h[t] = mu + phi * (h[t - 1] - mu) + sigma * gen.standard_normal()
    return np.exp(h[1:] / 2) * gen.standard_normal(T), h


def start_block(T, has_level=True):
    params = SvParams(mu=-1.0 if has_level else 0.0, phi=0.5, sigma=0.5)
    return SvBlock(states=np.zeros(T + 1), params=params, has_level=has_level)


def test_update_shapes_and_domain():
    y, _ = simulate_sv(200, -1.0, 0.9, 0.3)
    rng = RngHandle(seed=1)
    block = start_block(200)
    for _ in range(50):
        block = sv_update(rng, y, block, SvPriors())
        assert block.states.shape == (201,)
        assert np.all(np.isfinite(block.states))
        assert abs(block.params.phi) < 1.0 and block.params.sigma > 0.0


def test_update_without_level_keeps_mu_zero():
    y, _ = simulate_sv(150, 0.0, 0.9, 0.3, seed=2)
    rng = RngHandle(seed=2)
    block = start_block(150, has_level=False)
    for _ in range(30):
        block = sv_update(rng, y, block, SvPriors(a0=2.5, b0=2.5))
        assert block.params.mu == 0.0
        assert not block.has_level


def test_block_without_level_rejects_nonzero_mu():
    with pytest.raises(ContractViolation):
        SvBlock(states=np.zeros(3), params=SvParams(mu=0.5, phi=0.5, sigma=0.1), has_level=False)


def test_update_contract_errors():
    rng = RngHandle(seed=3)
    with pytest.raises(ContractViolation):
        sv_update(rng, np.ones(5), start_block(6), SvPriors())
    with pytest.raises(ContractViolation):
        sv_update(rng, np.zeros(0), start_block(0), SvPriors())
    with pytest.raises(DomainError):
        sv_update(rng, np.array([1.0, np.inf]), start_block(2), SvPriors())


def test_update_handles_exact_zero_observations():
    block = sv_update(RngHandle(seed=4), np.zeros(50), start_block(50), SvPriors())
    assert np.all(np.isfinite(block.states))


def test_update_is_deterministic_per_stream():
    y, _ = simulate_sv(100, -1.0, 0.9, 0.3, seed=5)
    a = sv_update(RngHandle(seed=9, stream_id=2), y, start_block(100), SvPriors())
    b = sv_update(RngHandle(seed=9, stream_id=2), y, start_block(100), SvPriors())
    c = sv_update(RngHandle(seed=9, stream_id=3), y, start_block(100), SvPriors())
    np.testing.assert_array_equal(a.states, b.states)
    assert a.params == b.params
    assert not np.array_equal(a.states, c.states)


def test_priors_validate():
    SvPriors().validate()
    with pytest.raises(DomainError):
        SvPriors(B_sigma=0.0).validate()
    with pytest.raises(DomainError):
        SvPriors(a0=-1.0).validate()


def test_stationary_init_moments_and_domain():
    rng = RngHandle(seed=6)
    params = SvParams(mu=-2.0, phi=0.8, sigma=0.3)
    draws = np.array([sv_stationary_init(rng, params) for _ in range(40_000)])
    assert draws.mean() == pytest.approx(-2.0, abs=0.01)
    assert draws.var() == pytest.approx(0.09 / 0.36, rel=0.03)
    no_level = np.array([sv_stationary_init(rng, params, has_level=False) for _ in range(40_000)])
    assert no_level.mean() == pytest.approx(0.0, abs=0.01)
    with pytest.raises(DomainError):
        sv_stationary_init(rng, SimpleNamespace(mu=0.0, phi=1.0, sigma=0.1))


@pytest.mark.slow
def test_posterior_recovers_simulated_parameters():
    mu, phi, sigma = -1.0, 0.95, 0.2
    y, h = simulate_sv(2000, mu, phi, sigma, seed=7)
    rng = RngHandle(seed=7)
    block = start_block(2000)
    kept = []
    for it in range(3000):
        block = sv_update(rng, y, block, SvPriors(b_mu=0.0, B_mu=100.0, a0=20.0, b0=1.5, B_sigma=1.0))
        if it >= 1000:
            kept.append((block.params.mu, block.params.phi, block.params.sigma, block.states.copy()))
    mus, phis, sigmas = (np.array([k[i] for k in kept]) for i in range(3))
    assert abs(mus.mean() - mu) < 0.4
    assert abs(phis.mean() - phi) < 0.05
    assert abs(sigmas.mean() - sigma) < 0.1
    path = np.mean([k[3] for k in kept], axis=0)
    assert np.corrcoef(path[1:], h[1:])[0, 1] > 0.6


GEWEKE_PRIORS = SvPriors(b_mu=-1.0, B_mu=0.5, a0=20.0, b0=5.0, B_sigma=0.1)


def prior_laws(priors):
    return {
        "mu": stats.norm(priors.b_mu, np.sqrt(priors.B_mu)),
        "phi": stats.beta(priors.a0, priors.b0, loc=-1.0, scale=2.0),
        "sigma2": stats.gamma(0.5, scale=2.0 * priors.B_sigma),
    }


def test_prior_draw_moments():
    rng = RngHandle(seed=8)
    draws = [sv_prior_draw(rng, GEWEKE_PRIORS) for _ in range(20_000)]
    laws = prior_laws(GEWEKE_PRIORS)
    assert np.mean([d.mu for d in draws]) == pytest.approx(laws["mu"].mean(), abs=0.02)
    assert np.mean([d.phi for d in draws]) == pytest.approx(laws["phi"].mean(), abs=0.005)
    assert np.mean([d.sigma**2 for d in draws]) == pytest.approx(laws["sigma2"].mean(), abs=0.005)
    assert all(abs(d.phi) < 1.0 and d.sigma > 0.0 for d in draws)
    without = sv_prior_draw(rng, GEWEKE_PRIORS, has_level=False)
    assert without.mu == 0.0


def assert_matches_prior(name, draws, law):
    """Mean and quantile coverage of a joint-distribution chain against the prior law."""
    draws = np.asarray(draws)
    mcse = batch_means_mcse(draws)
    assert abs(draws.mean() - law.mean()) <= 4.0 * mcse + 0.02 * law.std(), name
    for p in (0.1, 0.5, 0.9):
        below = (draws <= law.ppf(p)).astype(float)
        assert abs(below.mean() - p) <= 4.0 * batch_means_mcse(below) + 0.01, (name, p)


@pytest.mark.slow
@pytest.mark.parametrize("has_level", [True, False])
def test_successive_conditional_draws_keep_the_prior(has_level):
    """Alternating one update with fresh observations must leave the prior invariant."""
    T = 20
    rng = RngHandle(seed=21)
    data_rng = np.random.default_rng(22)
    params = sv_prior_draw(rng, GEWEKE_PRIORS, has_level)
    h = np.empty(T + 1)
    h[0] = sv_stationary_init(rng, params, has_level)
    level = params.mu if has_level else 0.0
    for t in range(1, T + 1):
        h[t] = level + params.phi * (h[t - 1] - level) + params.sigma * data_rng.standard_normal()
    block = SvBlock(states=h, params=params, has_level=has_level)

    trace = {"mu": [], "phi": [], "sigma2": []}
    for _ in range(100_000):
        y = np.exp(block.states[1:] / 2) * data_rng.standard_normal(T)
        block = sv_update(rng, y, block, GEWEKE_PRIORS)
        trace["mu"].append(block.params.mu)
        trace["phi"].append(block.params.phi)
        trace["sigma2"].append(block.params.sigma**2)

    laws = prior_laws(GEWEKE_PRIORS)
    for name in ("phi", "sigma2") + (("mu",) if has_level else ()):
        assert_matches_prior(name, trace[name], laws[name])
    if not has_level:
        assert np.all(np.asarray(trace["mu"]) == 0.0)
