import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from mpmath import mp, mpf
from scipy import stats

from exgen import evt
from exgen.evt import GpdParams

from conftest import bisect_quantile, type7_quantile


# --- CDF and quantile ------------------------------------------------------------


def test_cdf_examples():
    assert evt.gpd_cdf(0.0, GpdParams(1, 0.5)) == 0.0
    assert evt.gpd_cdf(2 * math.log(2), GpdParams(2, 0.0)) == pytest.approx(0.5, abs=1e-15)
    assert evt.gpd_cdf(1.0, GpdParams(1, 1.0)) == pytest.approx(0.5, abs=1e-15)


def test_cdf_domain_errors():
    with pytest.raises(evt.DomainError):
        evt.gpd_cdf(-0.1, GpdParams(1, 0.2))
    with pytest.raises(evt.DomainError):
        evt.gpd_cdf(2.0, GpdParams(1, -0.5))  # endpoint -sigma/xi = 2
    assert evt.gpd_cdf(1.999, GpdParams(1, -0.5)) < 1.0


def test_cdf_matches_scipy():
    x = np.linspace(0, 20, 101)
    for xi in (-0.3, 0.0, 0.25, 1.5):
        p = GpdParams(1.7, xi)
        xs = x[x < p.upper_endpoint]
        np.testing.assert_allclose(evt.gpd_cdf(xs, p), stats.genpareto.cdf(xs, xi, scale=1.7), rtol=1e-12, atol=1e-15)


def test_quantile_examples():
    assert evt.gpd_quantile(0.0, GpdParams(3, 0.4)) == 0.0
    assert evt.gpd_quantile(0.5, GpdParams(1, 0.0)) == pytest.approx(math.log(2), rel=1e-15)
    p = GpdParams(2, 0.3)
    oracle = bisect_quantile(lambda v: evt.gpd_cdf(v, p), 0.99, 0.0, 1e4)
    v = evt.gpd_quantile(0.99, p)
    assert v == pytest.approx(oracle, rel=1e-12)
    assert abs(evt.gpd_cdf(v, p) - 0.99) < 1e-10


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5, float("nan")])
def test_quantile_domain(p):
    with pytest.raises(evt.DomainError):
        evt.gpd_quantile(p, GpdParams(1, 0.1))


@pytest.mark.parametrize("xi", [-0.4, 0.0, 0.3, 1.0])
def test_roundtrip_grid(xi):
    params = GpdParams(1.3, xi)
    ps = np.concatenate([np.arange(0, 1.0, 0.1), [0.99, 0.999]])
    back = evt.gpd_cdf(evt.gpd_quantile(ps, params), params)
    assert np.max(np.abs(back - ps)) < 1e-10


@given(st.floats(0, 0.999999), st.floats(0.01, 100), st.floats(-0.49, 2.0))
def test_roundtrip_property(p, sigma, xi):
    params = GpdParams(sigma, xi)
    assert abs(evt.gpd_cdf(evt.gpd_quantile(p, params), params) - p) < 1e-10


@given(st.floats(0, 0.99), st.floats(0, 0.99), st.floats(-0.49, 2.0))
def test_quantile_monotone(p1, p2, xi):
    params = GpdParams(1.0, xi)
    q1, q2 = evt.gpd_quantile(p1, params), evt.gpd_quantile(p2, params)
    if p1 < p2:
        assert q1 <= q2


def test_xi_zero_continuity():
    x = np.linspace(0, 10 * 2.5, 501)
    a = evt.gpd_cdf(x, GpdParams(2.5, 1e-8))
    b = evt.gpd_cdf(x, GpdParams(2.5, 0.0))
    assert np.max(np.abs(a - b)) < 1e-6


def test_params_validation_and_json():
    with pytest.raises(evt.DomainError):
        GpdParams(0.0, 0.1)
    with pytest.raises(evt.DomainError):
        GpdParams(1.0, float("inf"))
    p = GpdParams(1.5, -0.2, 3.0)
    assert p.to_dict() == {"sigma": 1.5, "xi": -0.2, "offset_u": 3.0}
    assert GpdParams.from_dict(p.to_dict()) == p
    assert p.upper_endpoint == pytest.approx(7.5)


# --- likelihood --------------------------------------------------------------------


def test_log_likelihood_examples():
    assert evt.gpd_log_likelihood([0.0], GpdParams(1, 0.0)) == 0.0
    assert evt.gpd_log_likelihood([1.0, 2.0], GpdParams(1, 0.0)) == -3.0


def test_log_likelihood_errors_are_distinct():
    with pytest.raises(evt.EmptyInputError):
        evt.gpd_log_likelihood([], GpdParams(1, 0.1))
    assert evt.gpd_log_likelihood([1.0, 3.0], GpdParams(1, -0.5)) == -math.inf


def test_log_likelihood_matches_scipy(rng):
    x = rng.exponential(2.0, 200)
    for xi in (-0.1, 0.0, 0.4):
        p = GpdParams(2.2, xi)
        want = stats.genpareto.logpdf(x, xi, scale=2.2).sum()
        assert evt.gpd_log_likelihood(x, p) == pytest.approx(want, rel=1e-10)


def test_likelihood_prefers_truth():
    true = GpdParams(1.0, 0.2)
    wins = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = evt.gpd_quantile(r.random(500), true)
        ll = evt.gpd_log_likelihood(x, true)
        wins += ll >= evt.gpd_log_likelihood(x, GpdParams(1.2, 0.2)) and ll >= evt.gpd_log_likelihood(
            x, GpdParams(0.8, 0.2))
    assert wins >= 95


# --- fitting -----------------------------------------------------------------------


@pytest.mark.parametrize("xi", [0.0, 0.25])
def test_fit_recovers_self_sample(xi):
    r = np.random.default_rng(7)
    x = evt.gpd_quantile(r.random(100_000), GpdParams(1.0, xi))
    fit = evt.fit_gpd(x)
    assert abs(fit.sigma - 1.0) < 0.05
    assert abs(fit.xi - xi) < 0.05


def test_fit_exponential_mean_two():
    x = np.random.default_rng(3).exponential(2.0, 100_000)
    fit = evt.fit_gpd(x)
    assert abs(fit.xi) < 0.05
    assert abs(fit.sigma - 2.0) / 2.0 < 0.05


def test_fit_errors():
    with pytest.raises(evt.TooFewSamplesError):
        evt.fit_gpd(np.arange(10.0))
    with pytest.raises(evt.DegenerateInputError):
        evt.fit_gpd(np.full(50, 2.0))
    with pytest.raises(evt.DomainError):
        evt.fit_gpd(np.r_[np.arange(40.0), -1.0])
    assert evt.fit_gpd(np.arange(10.0) + 0.5, min_samples=5).sigma > 0


# Validation grid: sigma in geomspace(s/4, 4s, 25) x xi in linspace(-0.5, 2, 26), s = fitted sigma.
@pytest.mark.parametrize("seed,xi", [(0, -0.3), (1, 0.0), (2, 0.3), (3, 0.9)])
def test_fit_beats_validation_grid(seed, xi):
    r = np.random.default_rng(seed)
    x = evt.gpd_quantile(r.random(400), GpdParams(1.5, xi))
    fit = evt.fit_gpd(x)
    best = evt.gpd_log_likelihood(x, fit)
    assert np.isfinite(best)
    assert np.all(1 + fit.xi * x / fit.sigma > 0)
    for s in np.geomspace(fit.sigma / 4, fit.sigma * 4, 25):
        for g in np.linspace(-0.5, 2.0, 26):
            assert evt.gpd_log_likelihood(x, GpdParams(s, g)) <= best + 1e-9


def test_fit_agrees_with_scipy_mle():
    r = np.random.default_rng(11)
    x = evt.gpd_quantile(r.random(5000), GpdParams(0.7, 0.15))
    fit = evt.fit_gpd(x)
    xi, _, sigma = stats.genpareto.fit(x, floc=0)
    ours = evt.gpd_log_likelihood(x, fit)
    theirs = evt.gpd_log_likelihood(x, GpdParams(sigma, xi))
    assert ours >= theirs - 1e-6


def test_fit_consistency_error_shrinks():
    # error should roughly halve as n quadruples; compare n and 16n averaged over 5 seeds
    true = GpdParams(1.0, 0.25)

    def mean_err(n):
        errs = []
        for seed in range(5):
            x = evt.gpd_quantile(np.random.default_rng(seed).random(n), true)
            f = evt.fit_gpd(x)
            errs.append(abs(f.xi - true.xi) + abs(f.sigma - true.sigma))
        return np.mean(errs)

    assert mean_err(32_000) < 0.5 * mean_err(2_000)


# --- threshold, probability, level --------------------------------------------------


def test_select_threshold_examples():
    vals = list(range(1, 101))
    u, exc = evt.select_threshold(vals, 0.95)
    assert u == pytest.approx(type7_quantile(vals, 0.95))
    assert u == pytest.approx(95.05)
    assert len(exc) == 5
    u, exc = evt.select_threshold([5, 5, 5], 0.3)
    assert u == 5 and exc.size == 0
    u, exc = evt.select_threshold([1, 2], 0.0)
    assert u == 1 and list(exc) == [1]
    with pytest.raises(evt.EmptyInputError):
        evt.select_threshold([])


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.floats(0, 1))
def test_select_threshold_property(values, q):
    u, exc = evt.select_threshold(values, q)
    assert u == pytest.approx(type7_quantile(values, q), rel=1e-9, abs=1e-6)
    above = [v - u for v in values if v > u]
    np.testing.assert_allclose(exc, above)


def test_adjust_probability_high_precision():
    mp.dps = 50
    exact = mpf("0.01") / mpf("0.75") ** 10
    assert evt.adjust_probability(0.01, 0.75, 10) == pytest.approx(float(exact), rel=1e-14)
    assert abs(evt.adjust_probability(0.01, 0.75, 10) - 0.1775772663) < 1e-9


def test_adjust_probability_cases():
    assert evt.adjust_probability(0.05, 0.5, 0) == 0.05
    with pytest.raises(evt.InvalidRequestError):
        evt.adjust_probability(0.5, 0.5, 3)
    assert evt.adjust_probability(0.125, 0.5, 3) == 1.0
    assert evt.TailRequest(0.01, 0.5, 2).tau_prime == pytest.approx(0.04)


def test_extremeness_level_examples():
    assert evt.extremeness_level(GpdParams(1, 0.0, 0.0), 1.0) == 0.0
    assert evt.extremeness_level(GpdParams(1, 0.0, 10.0), 0.01) == pytest.approx(10 + math.log(100), rel=1e-14)
    with pytest.raises(evt.DomainError):
        evt.extremeness_level(GpdParams(1, 0.0), 0.0)


def test_extremeness_level_exceedance_frequency():
    r = np.random.default_rng(99)
    fit = evt.fit_gpd(evt.gpd_quantile(r.random(100_000), GpdParams(1.0, 0.25)))
    e = evt.extremeness_level(fit, 0.05)
    fresh = evt.gpd_quantile(np.random.default_rng(100).random(1_000_000), GpdParams(1.0, 0.25))
    assert abs(np.mean(fresh > e) - 0.05) < 0.003


@given(st.floats(1e-9, 1.0), st.floats(1e-9, 1.0), st.floats(-0.45, 1.5))
def test_extremeness_level_monotone(t1, t2, xi):
    p = GpdParams(1.0, xi, 2.0)
    if t1 < t2 and (1 - t1) < 1 and (t2 - t1) > 1e-12:
        assert evt.extremeness_level(p, t1) > evt.extremeness_level(p, t2)
