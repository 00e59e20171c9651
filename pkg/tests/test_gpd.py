import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from izsd.gpd import (
    ExceedanceSample,
    GpdParams,
    InsufficientTailError,
    fit_gpd_mle,
    gpd_cdf,
    gpd_log_likelihood,
    gpd_ppf,
    qq_correlation,
    qq_points,
    select_threshold,
)

from oracles import gpd_sample


def test_cdf_closed_forms():
    assert gpd_cdf(0.0, GpdParams(1.3, 0.4)) == 0.0
    assert gpd_cdf(1.0, GpdParams(1.0, 1.0)) == pytest.approx(0.5, abs=1e-15)
    assert gpd_cdf(2.0, GpdParams(2.0, 0.0)) == pytest.approx(1 - math.exp(-1), abs=1e-15)


def test_cdf_beyond_bounded_support_is_one():
    p = GpdParams(1.0, -0.5)
    assert p.upper_bound == pytest.approx(2.0)
    assert gpd_cdf(2.5, p) == 1.0


def test_cdf_rejects_negative():
    with pytest.raises(ValueError):
        gpd_cdf(-0.1, GpdParams(1.0, 0.0))


def test_params_validate():
    with pytest.raises(ValueError):
        GpdParams(0.0, 0.1)
    with pytest.raises(ValueError):
        GpdParams(1.0, float("nan"))


def test_log_likelihood_closed_forms():
    assert gpd_log_likelihood([0.0], GpdParams(1.0, 0.0)) == 0.0
    assert gpd_log_likelihood([1.0, 2.0], GpdParams(1.0, 0.0)) == pytest.approx(-3.0)
    assert gpd_log_likelihood([3.0], GpdParams(1.0, -0.5)) == -math.inf


def test_log_likelihood_matches_density_sum():
    x = np.array([0.1, 0.7, 2.5])
    s, xi = 1.4, 0.3
    dens = (1 / s) * (1 + xi * x / s) ** (-1 / xi - 1)
    assert gpd_log_likelihood(x, GpdParams(s, xi)) == pytest.approx(np.log(dens).sum(), rel=1e-12)


def test_threshold_hand_sorted():
    d = np.arange(10, 0, -1, dtype=float)
    # ceil(0.2 * 10) = 2 values lie strictly above the threshold
    s = select_threshold(d, 0.2, min_excess=1)
    assert s.threshold_u == 8.0
    assert list(s.excesses) == [1.0, 2.0]
    assert s.source_count == 10


def test_threshold_half_of_ten():
    s = select_threshold(np.arange(1, 11, dtype=float), 0.5)
    assert s.n_excess == 5
    assert s.threshold_u == 5.0


def test_threshold_constant_raises():
    with pytest.raises(InsufficientTailError):
        select_threshold(np.full(50, 0.3), 0.2)


def test_threshold_too_few():
    with pytest.raises(InsufficientTailError):
        select_threshold(np.arange(10.0), 0.2)


def test_threshold_against_percentile():
    d = np.random.default_rng(3).exponential(size=100)
    s = select_threshold(d, 0.2)
    assert s.threshold_u == pytest.approx(np.percentile(d, 80, method="lower"), abs=0.05)
    assert s.n_excess == np.sum(d > s.threshold_u) == 20
    assert np.all(s.excesses > 0)


def test_excesses_read_only():
    s = select_threshold(np.arange(100.0), 0.2)
    with pytest.raises(ValueError):
        s.excesses[0] = 1.0


def test_fit_exponential():
    x = np.random.default_rng(0).exponential(2.0, size=2000)
    p = fit_gpd_mle(ExceedanceSample(0.0, x, x.size))
    assert 1.8 <= p.sigma <= 2.2
    assert -0.1 <= p.xi <= 0.1


def test_fit_heavy_tail():
    x = gpd_sample(np.random.default_rng(1), 2000, 1.0, 0.5)
    p = fit_gpd_mle(x)
    assert 0.85 <= p.sigma <= 1.15
    assert 0.38 <= p.xi <= 0.62


def test_fit_flat_sample():
    p = fit_gpd_mle(np.ones(5))
    assert p.xi < 0
    assert math.isfinite(p.sigma)
    assert p.upper_bound >= 1.0


def _grid_best(x):
    best = -math.inf
    for xi in np.arange(-0.5, 1.0 + 1e-12, 0.01):
        for sigma in np.arange(0.01, 3 * x.mean() + 1e-12, 0.01):
            z = 1 + xi * x / sigma
            if np.any(z <= 0):
                continue
            if abs(xi) < 1e-12:
                ll = -x.size * math.log(sigma) - x.sum() / sigma
            else:
                ll = -x.size * math.log(sigma) - (1 / xi + 1) * np.log(z).sum()
            best = max(best, ll)
    return best


@pytest.mark.parametrize("seed,sigma,xi", [(0, 0.5, -0.25), (1, 1.0, 0.0), (2, 0.8, 0.6)])
def test_fit_beats_brute_force_grid(seed, sigma, xi):
    x = gpd_sample(np.random.default_rng(seed), 60, sigma, xi)
    p = fit_gpd_mle(x)
    assert gpd_log_likelihood(x, p) >= _grid_best(x) - 1e-6


def test_qq_single_median():
    sigma = 1.7
    pts = qq_points(np.array([sigma * math.log(2)]), GpdParams(sigma, 0.0))
    assert pts.shape == (1, 2)
    assert pts[0, 0] == pytest.approx(sigma * math.log(2))
    assert pts[0, 1] == pytest.approx(sigma * math.log(2))


def test_qq_well_specified():
    x = gpd_sample(np.random.default_rng(4), 2000, 1.0, 0.2)
    p = fit_gpd_mle(x)
    assert qq_correlation(qq_points(x, p)) > 0.99


def test_qq_misspecified_lower_and_monotone():
    rng = np.random.default_rng(5)
    good = rng.exponential(size=2000)
    bad = rng.uniform(size=2000)
    expo = GpdParams(1.0, 0.0)
    r_good = qq_correlation(qq_points(good, expo))
    pts = qq_points(bad, GpdParams(bad.mean(), 0.0))
    assert qq_correlation(pts) < r_good
    assert np.all(np.diff(pts[:, 0]) > 0)
    assert np.all(np.diff(pts[:, 1]) >= 0)


@settings(max_examples=60, deadline=None)
@given(
    sigma=st.floats(0.05, 5.0),
    xi=st.floats(-0.5, 1.0),
    p=st.floats(0.0, 0.999),
)
def test_ppf_inverts_cdf(sigma, xi, p):
    params = GpdParams(sigma, xi)
    x = gpd_ppf(p, params)
    assert gpd_cdf(x, params) == pytest.approx(p, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(sigma=st.floats(0.05, 5.0), xi=st.floats(-0.5, 1.0), a=st.floats(0, 10), b=st.floats(0, 10))
def test_cdf_monotone_and_bounded(sigma, xi, a, b):
    params = GpdParams(sigma, xi)
    lo, hi = sorted((a, b))
    ca, cb = gpd_cdf(lo, params), gpd_cdf(hi, params)
    assert 0.0 <= ca <= cb <= 1.0
