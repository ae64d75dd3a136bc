"""Generalized Gamma distribution in the (mu, sigma, nu) parameterization.

With ``theta = 1 / (sigma^2 nu^2)`` and ``z = (y / mu)^nu``, ``z`` follows a
Gamma(theta, scale=1/theta) law, so

    f(y) = |nu| theta^theta z^theta exp(-theta z) / (Gamma(theta) y).

``nu = 1`` is the Gamma distribution with mean ``mu`` and shape ``1/sigma^2``;
as ``nu -> 0`` the family tends to the log-normal with median ``mu`` and
log-scale SD ``sigma``.  Density and scores are evaluated in a form that is
smooth through that limit.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from .._errors import ValidationError

_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)
# for theta above this the asymptotic series are accurate to ~1e-13 absolute
_SERIES_THETA = 15.0
# for theta above this quantiles and the CDF use a skew-corrected normal expansion
_NORMAL_THETA = 1e10

# Taylor coefficients (highest power first) of g'(x) for g(x) = (exp(x) - 1 - x) / x^2
_DG = [k / special.factorial(k + 2) for k in range(1, 13)][::-1]


def theta(sigma, nu):
    return 1.0 / (np.square(sigma) * np.square(nu))


def _check(y, mu, sigma, nu):
    y, mu, sigma, nu = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, mu, sigma, nu)))
    if not (np.isfinite(mu).all() and np.isfinite(sigma).all() and np.isfinite(nu).all()):
        raise ValidationError("NON_FINITE", "distribution parameters must be finite")
    if (mu <= 0).any() or (sigma <= 0).any() or (nu == 0).any():
        raise ValidationError("BAD_PARAMETER", "need mu > 0, sigma > 0, nu != 0")
    if not np.isfinite(y).all() or (y <= 0).any():
        raise ValidationError("NONPOSITIVE_RESPONSE", "y must be positive and finite")
    return y, mu, sigma, nu


def _by_theta(q, series, direct):
    """Evaluate ``series(q)`` where ``1/q >= _SERIES_THETA`` and ``direct(theta)`` elsewhere."""
    q = np.asarray(q, dtype=float)
    big = q <= 1.0 / _SERIES_THETA
    if big.all():
        return series(q)
    if not big.any():
        return direct(1.0 / q)
    out = np.empty(q.shape)
    big = np.broadcast_to(big, q.shape)
    out[big] = series(q[big])
    out[~big] = direct(1.0 / q[~big])
    return out


def _stirling_remainder(q):
    """``gammaln(th) - ((th - 1/2) log th - th + log sqrt(2 pi))`` at ``th = 1/q``."""
    def series(q):
        q2 = q * q
        return q * (1 / 12 - q2 * (1 / 360 - q2 * (1 / 1260 - q2 / 1680)))

    def direct(th):
        return special.gammaln(th) - ((th - 0.5) * np.log(th) - th + _HALF_LOG_2PI)
    return _by_theta(q, series, direct)


def _digamma_gap(q):
    """``th^2 (log th - digamma(th) - 1/(2 th))`` at ``th = 1/q``; tends to 1/12 as q -> 0."""
    def series(q):
        q2 = q * q
        return 1 / 12 - q2 * (1 / 120 - q2 * (1 / 252 - q2 * (1 / 240 - q2 / 132)))

    def direct(th):
        return th * th * (np.log(th) - special.digamma(th) - 0.5 / th)
    return _by_theta(q, series, direct)


def _excess_ratio(x):
    """``(exp(x) - 1 - x) / x^2``, equal to 1/2 at 0."""
    x = np.asarray(x, dtype=float)
    # the direct form loses ~eps / |x| relative accuracy, so small |x| uses the series
    small = np.abs(x) < 1e-3
    xd = np.where(small, 1.0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray((np.expm1(xd) - xd) / (xd * xd))
    if small.any():
        xs = x[small]
        out[small] = 1 / 2 + xs * (1 / 6 + xs * (1 / 24 + xs * (1 / 120 + xs / 720)))
    return out


def _excess_ratio_deriv(x):
    """Derivative of :func:`_excess_ratio`, equal to 1/6 at 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.1
    xd = np.where(small, 1.0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(small, np.polyval(_DG, x), ((xd - 2) * np.expm1(xd) + 2 * xd) / xd ** 3)


def _log_density(log_y, log_mu, sigma, nu):
    # |nu| theta^theta / Gamma(theta) and theta (x - exp(x)) are rewritten around
    # their nu -> 0 limits; nu = 0 gives the log-normal density exactly
    r = log_y - log_mu
    q = np.square(sigma * nu)
    with np.errstate(over="ignore", invalid="ignore"):
        return (-np.log(sigma) - _HALF_LOG_2PI - _stirling_remainder(q)
                - np.square(r / sigma) * _excess_ratio(nu * r) - log_y)


def gg_logpdf(y, mu, sigma, nu):
    """Log density, vectorized over broadcastable inputs."""
    y, mu, sigma, nu = _check(y, mu, sigma, nu)
    out = _log_density(np.log(y), np.log(mu), sigma, nu)
    return out[()] if out.ndim == 0 else out


def gg_link_scores(y, mu, sigma, nu):
    """Scores on the link scale: d/dlog(mu), d/dlog(sigma), d/dnu."""
    y, mu, sigma, nu = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (y, mu, sigma, nu)))
    r = np.log(y) - np.log(mu)
    x = nu * r
    q = np.square(sigma * nu)
    k = _digamma_gap(q)
    s2 = sigma * sigma
    with np.errstate(over="ignore", invalid="ignore"):
        u_mu = r / s2 * special.exprel(x)
        u_sigma = -1 - 2 * q * k + 2 * r * r / s2 * _excess_ratio(x)
        u_nu = -2 * s2 * nu * k - r ** 3 / s2 * _excess_ratio_deriv(x)
    return u_mu, u_sigma, u_nu


def gg_gradient(y, mu, sigma, nu):
    """Derivatives of the log density with respect to ``(mu, sigma, nu)``."""
    y, mu, sigma, nu = _check(y, mu, sigma, nu)
    u_mu, u_sigma, u_nu = gg_link_scores(y, mu, sigma, nu)
    return u_mu / mu, u_sigma / sigma, u_nu


def _normal_expansion(sigma, nu):
    # log(Q / theta) / nu for Q ~ Gamma(theta) has mean, SD and skewness terms
    # that are smooth in nu; relative error O(sigma^2 nu^2)
    q = np.square(sigma * nu)
    shift = -sigma * sigma * nu * (0.5 + q / 12)
    scale = sigma * np.sqrt(1 + q / 2)
    return shift, scale


def gg_cdf(y, mu, sigma, nu):
    y, mu, sigma, nu = _check(y, mu, sigma, nu)
    th = theta(sigma, nu)
    log_r = np.log(y) - np.log(mu)
    with np.errstate(over="ignore"):
        z = np.exp(nu * log_r)
        p = special.gammainc(th, th * z)
    exact = np.where(nu > 0, p, 1 - p)
    shift, scale = _normal_expansion(sigma, nu)
    t = (log_r - shift) / scale
    approx = special.ndtr(t) + np.exp(-0.5 * t * t) / np.sqrt(2 * np.pi) * sigma * nu * (t * t - 1) / 6
    out = np.where(th > _NORMAL_THETA, approx, exact)
    return out[()] if out.ndim == 0 else out


def gg_ppf(p, mu, sigma, nu):
    """Quantile function; for ``nu < 0`` the Gamma tail is reversed."""
    p = np.asarray(p, dtype=float)
    if ((p <= 0) | (p >= 1)).any():
        raise ValidationError("PERCENTILE_RANGE", "probabilities must lie in (0, 1)")
    p, mu, sigma, nu = np.broadcast_arrays(p, *(np.asarray(a, dtype=float) for a in (mu, sigma, nu)))
    with np.errstate(divide="ignore"):
        th = theta(sigma, nu)
    big = th > _NORMAL_THETA
    th_exact = np.where(big, 1.0, th)
    pp = np.where(nu > 0, p, 1 - p)
    q = special.gammaincinv(th_exact, pp)
    # small shapes underflow; there P(th, x) ~ x**th / Gamma(th + 1) to relative O(x)
    tiny = q < 1e-250
    with np.errstate(divide="ignore"):
        log_q = np.where(tiny, (np.log(pp) + special.gammaln(th_exact + 1)) / th_exact, np.log(q))
        exact = (log_q - np.log(th_exact)) / np.where(big, 1.0, nu)
    z = special.ndtri(p)
    shift, scale = _normal_expansion(sigma, nu)
    approx = shift + scale * z - sigma * sigma * nu * (z * z - 1) / 6
    out = mu * np.exp(np.where(big, approx, exact))
    return out[()] if out.ndim == 0 else out


def gg_rvs(mu, sigma, nu, size=None, rng=None):
    """Draw samples by transforming Gamma(theta, 1/theta) variates."""
    rng = np.random.default_rng(rng)
    mu, sigma, nu = (np.asarray(a, dtype=float) for a in (mu, sigma, nu))
    th = theta(sigma, nu)
    if size is None:
        size = np.broadcast(mu, sigma, nu).shape
    z = rng.gamma(th, 1.0 / th, size=size)
    return mu * np.exp(np.log(z) / nu)
