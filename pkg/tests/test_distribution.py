import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cohort_forge._errors import ValidationError
from cohort_forge.gamlss import gg_gradient, gg_logpdf, gg_ppf, gg_rvs
from cohort_forge.gamlss.distribution import gg_cdf, gg_link_scores

mus = st.floats(0.01, 100.0)
sigmas = st.floats(0.02, 1.0)
nus = st.floats(-3.0, 3.0).filter(lambda v: abs(v) > 0.05)
probs = st.floats(0.001, 0.999)


def _stacy(mu, sigma, nu):
    # y = mu (W / theta)^(1/nu) with W ~ Gamma(theta) is scipy's gengamma(a=theta, c=nu)
    th = 1.0 / (sigma * nu) ** 2
    return stats.gengamma(th, nu, scale=mu * th ** (-1.0 / nu))


@given(mus, sigmas, nus, probs)
def test_matches_scipy_gengamma(mu, sigma, nu, p):
    ref = _stacy(mu, sigma, nu)
    y = ref.ppf(p)
    assert gg_logpdf(y, mu, sigma, nu) == pytest.approx(ref.logpdf(y), rel=1e-8, abs=1e-8)
    assert gg_cdf(y, mu, sigma, nu) == pytest.approx(p, abs=1e-9)
    assert gg_ppf(p, mu, sigma, nu) == pytest.approx(y, rel=1e-8)


@given(mus, sigmas, nus, probs)
def test_cdf_inverts_ppf(mu, sigma, nu, p):
    assert gg_cdf(gg_ppf(p, mu, sigma, nu), mu, sigma, nu) == pytest.approx(p, abs=1e-9)


@given(mus, sigmas, probs)
def test_nu_one_is_gamma_with_mean_mu(mu, sigma, p):
    ref = stats.gamma(1 / sigma ** 2, scale=mu * sigma ** 2)
    y = ref.ppf(p)
    assert gg_logpdf(y, mu, sigma, 1.0) == pytest.approx(ref.logpdf(y), rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("nu", [1e-4, -1e-4, 1e-7, 1e-12])
def test_log_normal_limit(nu):
    mu, sigma = 2.0, 0.3
    y = np.array([1.0, 2.0, 3.5])
    ref = stats.lognorm(sigma, scale=mu)
    assert np.allclose(gg_logpdf(y, mu, sigma, nu), ref.logpdf(y), atol=5 * abs(nu))
    assert np.allclose(gg_ppf([0.1, 0.5, 0.9], mu, sigma, nu), ref.ppf([0.1, 0.5, 0.9]),
                       rtol=5 * abs(nu))


def test_scores_are_finite_at_nu_zero():
    u = gg_link_scores(np.array([0.5, 1.0, 2.0]), 1.0, 0.2, 0.0)
    r = np.log([0.5, 1.0, 2.0])
    # log-normal scores r / s^2 and -1 + r^2 / s^2; the nu score is -r^3 / (6 s^2)
    assert np.allclose(u[0], r / 0.04)
    assert np.allclose(u[1], -1 + r ** 2 / 0.04)
    assert np.allclose(u[2], -r ** 3 / (6 * 0.04))


@given(st.floats(0.5, 5.0), sigmas, nus, probs)
def test_gradient_matches_finite_differences(mu, sigma, nu, p):
    y = gg_ppf(p, mu, sigma, nu)
    grad = gg_gradient(y, mu, sigma, nu)
    args = [mu, sigma, nu]
    for j in range(3):
        h = 1e-6 * max(abs(args[j]), 1e-3)
        up, dn = list(args), list(args)
        up[j] += h
        dn[j] -= h
        fd = (gg_logpdf(y, *up) - gg_logpdf(y, *dn)) / (2 * h)
        assert grad[j] == pytest.approx(fd, rel=1e-5, abs=1e-5 * (1 + abs(fd)))


@given(mus, sigmas, nus)
def test_ppf_is_increasing(mu, sigma, nu):
    q = gg_ppf(np.linspace(0.01, 0.99, 25), mu, sigma, nu)
    assert (np.diff(q) > 0).all()


def test_ppf_smooth_across_normal_threshold():
    # theta crosses 1e10 between these two shapes; the exact branch there is
    # limited by gammaincinv's ~1e-13 accuracy divided by nu ~ 1e-4
    sigma = 0.1
    a = gg_ppf(0.9, 1.0, sigma, 1 / (sigma * np.sqrt(0.99e10)))
    b = gg_ppf(0.9, 1.0, sigma, 1 / (sigma * np.sqrt(1.01e10)))
    assert a == pytest.approx(b, rel=2e-8)


def test_sampling_moments():
    y = gg_rvs(3.0, 0.2, 0.5, size=100_000, rng=0)
    assert np.median(y) == pytest.approx(gg_ppf(0.5, 3.0, 0.2, 0.5), rel=5e-3)
    assert np.quantile(y, 0.9) == pytest.approx(gg_ppf(0.9, 3.0, 0.2, 0.5), rel=5e-3)


@pytest.mark.parametrize("args, code", [
    ((1.0, -1.0, 0.2, 0.5), "BAD_PARAMETER"),
    ((1.0, 1.0, 0.2, 0.0), "BAD_PARAMETER"),
    ((0.0, 1.0, 0.2, 0.5), "NONPOSITIVE_RESPONSE"),
    ((1.0, np.nan, 0.2, 0.5), "NON_FINITE"),
])
def test_parameter_errors(args, code):
    with pytest.raises(ValidationError) as e:
        gg_logpdf(*args)
    assert e.value.code == code


def test_ppf_rejects_bad_probabilities():
    with pytest.raises(ValidationError) as e:
        gg_ppf([0.0, 0.5], 1.0, 0.1, 0.5)
    assert e.value.code == "PERCENTILE_RANGE"


def test_gamma_special_case_on_grid():
    for mu in (0.5, 1.0, 2.0):
        for sigma in (0.3, 0.6, 1.0):
            ref = stats.gamma(1 / sigma ** 2, scale=mu * sigma ** 2)
            y = ref.ppf([0.05, 0.3, 0.5, 0.8, 0.99])
            assert np.allclose(gg_logpdf(y, mu, sigma, 1.0), ref.logpdf(y), rtol=0, atol=1e-10)
            th = 1 / sigma ** 2
            median = mu * stats.gamma(th).ppf(0.5) / th
            assert gg_ppf(0.5, mu, sigma, 1.0) == pytest.approx(median, rel=1e-8)


@pytest.mark.parametrize("mu", [0.5, 1.0, 3.0])
def test_unit_theta_at_the_location(mu):
    assert gg_logpdf(mu, mu, 1.0, 1.0) == pytest.approx(-1 - np.log(mu), abs=1e-13)
