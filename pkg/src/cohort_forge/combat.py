"""Empirical-Bayes ComBat harmonization with study as batch.

The location/scale model per feature ``f`` is::

    y_ijf = alpha_f + X_ij beta_f + gamma_if + delta_if * eps_ijf

Batch effects are estimated on standardized data and shrunk across features
with Normal / Inverse-Gamma priors.
"""
from __future__ import annotations

import json
import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._errors import NumericalError, ValidationError
from ._validation import check_1d, check_2d, check_covariates, check_is_fitted
from .cohort import MetricTable

logger = logging.getLogger(__name__)

COVARIATE_NAMES = ("age", "sex_male", "group_case")


def _postmean(n, g_hat, g_bar, t2, d2):
    return (n * t2 * g_hat + d2 * g_bar) / (n * t2 + d2)


def _postvar(sum_sq, n, lam, theta):
    return (theta + 0.5 * sum_sq) / (n / 2 + lam - 1)


class ComBat(TransformerMixin, BaseEstimator):
    """ComBat location/scale harmonization.

    Parameters
    ----------
    tol : float
        Stop the empirical-Bayes iteration when the largest absolute change
        of any ``gamma*`` or ``delta*^2`` falls below this value.
    max_iter : int
        Iteration cap; reaching it raises ``NON_CONVERGENCE``.
    empirical_bayes : bool
        Pool batch effects across features.  With a single feature pooling is
        impossible and raw batch estimates are used regardless.

    Attributes
    ----------
    batches_ : ndarray of str
    alpha_ : ndarray, shape (n_features,)
    beta_ : ndarray, shape (n_covariates, n_features)
    sigma_ : ndarray, shape (n_features,)
        Pooled residual standard deviation.
    gamma_star_, delta_star_ : ndarray, shape (n_batches, n_features)
        Additive (standardized units) and multiplicative site effects.
    """

    def __init__(self, tol=1e-6, max_iter=500, empirical_bayes=True):
        self.tol = tol
        self.max_iter = max_iter
        self.empirical_bayes = empirical_bayes

    def fit(self, X, batch, covariates=None):
        X = check_2d(X)
        n, p = X.shape
        batch = check_1d(batch, n, "batch", dtype=object).astype(str)
        C = check_covariates(covariates, n)
        complete = ~np.isnan(X).any(axis=1)
        Y, b, C = X[complete], batch[complete], C[complete]

        labels = np.array(sorted(set(batch)))
        if len(labels) < 2:
            raise ValidationError("SINGLE_BATCH", "ComBat needs at least two batches")
        onehot = (b[:, None] == labels[None, :]).astype(float)
        counts = onehot.sum(axis=0)
        if (counts < 2).any():
            small = labels[counts < 2]
            raise ValidationError("SMALL_BATCH", f"batches with < 2 complete rows: {list(small)}")
        N = len(Y)

        design = np.hstack([onehot, C])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise ValidationError("DEGENERATE_DESIGN", "covariates are collinear with batch")
        B = np.linalg.solve(design.T @ design, design.T @ Y)
        k = len(labels)
        alpha = (counts / N) @ B[:k]
        beta = B[k:]
        var_pooled = ((Y - design @ B) ** 2).mean(axis=0)
        # rounding leaves ~eps^2 residual variance on a constant feature
        if (var_pooled <= (1e-10 * np.abs(Y).max(axis=0)) ** 2).any():
            raise NumericalError("ZERO_VARIANCE", "a feature has no residual variance")
        sigma = np.sqrt(var_pooled)
        Z = (Y - alpha - C @ beta) / sigma

        members = [onehot[:, i].astype(bool) for i in range(k)]
        gamma_hat = np.vstack([Z[m].mean(axis=0) for m in members])
        delta_hat2 = np.vstack([Z[m].var(axis=0, ddof=1) for m in members])

        self.n_iter_ = np.zeros(k, dtype=int)
        if self.empirical_bayes and p >= 2:
            gamma_bar = gamma_hat.mean(axis=1)
            tau2_bar = gamma_hat.var(axis=1, ddof=1)
            V = delta_hat2.mean(axis=1)
            S2 = delta_hat2.var(axis=1, ddof=1)
            with np.errstate(divide="ignore"):
                lambda_bar = V ** 2 / S2 + 2
                theta_bar = V ** 3 / S2 + V
            gamma_star = np.empty_like(gamma_hat)
            delta_star2 = np.empty_like(delta_hat2)
            for i, m in enumerate(members):
                g, d2, it = self._eb_iterate(Z[m], gamma_hat[i], delta_hat2[i], gamma_bar[i],
                                             tau2_bar[i], lambda_bar[i], theta_bar[i], V[i])
                gamma_star[i], delta_star2[i], self.n_iter_[i] = g, d2, it
            self.gamma_bar_, self.tau2_bar_ = gamma_bar, tau2_bar
            self.lambda_bar_, self.theta_bar_ = lambda_bar, theta_bar
        else:
            gamma_star, delta_star2 = gamma_hat.copy(), delta_hat2.copy()
            nan = np.full(k, np.nan)
            self.gamma_bar_, self.tau2_bar_, self.lambda_bar_, self.theta_bar_ = nan, nan, nan, nan

        self.batches_ = labels
        self.n_per_batch_ = counts.astype(int)
        self.n_features_in_ = p
        self.alpha_, self.beta_, self.sigma_ = alpha, beta, sigma
        self.gamma_hat_, self.delta_hat2_ = gamma_hat, delta_hat2
        self.gamma_star_ = gamma_star
        self.delta_star_ = np.sqrt(delta_star2)
        return self

    def _eb_iterate(self, z, g_hat, d_hat2, g_bar, t2, lam, theta, V):
        n = len(z)
        g_old, d_old = g_hat, d_hat2
        for it in range(1, self.max_iter + 1):
            g_new = _postmean(n, g_hat, g_bar, t2, d_old)
            if np.isfinite(lam):
                d_new = _postvar(((z - g_new) ** 2).sum(axis=0), n, lam, theta)
            else:
                # zero spread of delta_hat^2 across features: the prior is a point mass
                d_new = np.full_like(d_old, V)
            change = max(np.abs(g_new - g_old).max(), np.abs(d_new - d_old).max())
            g_old, d_old = g_new, d_new
            if change < self.tol:
                return g_new, d_new, it
        raise NumericalError("NON_CONVERGENCE", f"empirical Bayes did not converge in {self.max_iter} iterations")

    def _batch_index(self, batch, n):
        batch = check_1d(batch, n, "batch", dtype=object).astype(str)
        lookup = {b: i for i, b in enumerate(self.batches_)}
        unknown = sorted(set(batch) - set(lookup))
        if unknown:
            raise ValidationError("UNKNOWN_BATCH", f"batches not seen in fit: {unknown}")
        return np.array([lookup[b] for b in batch], dtype=int)

    def standardize(self, X, covariates=None):
        check_is_fitted(self, "gamma_star_")
        X = check_2d(X)
        C = check_covariates(covariates, len(X))
        return (X - self.alpha_ - C @ self.beta_) / self.sigma_

    def transform(self, X, batch, covariates=None):
        """Remove the fitted site effects; missing cells stay missing."""
        check_is_fitted(self, "gamma_star_")
        X = check_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError("BAD_SHAPE", f"expected {self.n_features_in_} features, got {X.shape[1]}")
        idx = self._batch_index(batch, len(X))
        C = check_covariates(covariates, len(X))
        stand_mean = self.alpha_ + C @ self.beta_
        Z = (X - stand_mean) / self.sigma_
        return self.sigma_ * (Z - self.gamma_star_[idx]) / self.delta_star_[idx] + stand_mean

    def fit_transform(self, X, batch, covariates=None):
        return self.fit(X, batch, covariates).transform(X, batch, covariates)

    def to_dict(self) -> dict:
        check_is_fitted(self, "gamma_star_")

        def arr(a):
            return [None if np.isnan(v) else float(v) for v in np.ravel(a)] if np.ndim(a) == 1 \
                else [arr(row) for row in a]

        return {
            "params": self.get_params(),
            "features": list(getattr(self, "feature_names_", [])),
            "covariates": list(getattr(self, "covariate_names_", [])),
            "batches": [str(b) for b in self.batches_],
            "n_per_batch": [int(v) for v in self.n_per_batch_],
            "alpha": arr(self.alpha_), "beta": arr(self.beta_), "sigma": arr(self.sigma_),
            "gamma_hat": arr(self.gamma_hat_), "delta_hat2": arr(self.delta_hat2_),
            "gamma_bar": arr(self.gamma_bar_), "tau2_bar": arr(self.tau2_bar_),
            "lambda_bar": arr(self.lambda_bar_), "theta_bar": arr(self.theta_bar_),
            "gamma_star": arr(self.gamma_star_), "delta_star": arr(self.delta_star_),
            "n_iter": [int(v) for v in self.n_iter_],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ComBat":
        model = cls(**doc["params"])

        def arr(a, ndim):
            out = np.array([np.nan if v is None else v for v in a] if ndim == 1
                           else [[np.nan if v is None else v for v in row] for row in a], dtype=float)
            return out

        p = len(doc["alpha"])
        model.feature_names_ = list(doc.get("features", []))
        model.covariate_names_ = list(doc.get("covariates", []))
        model.batches_ = np.array(doc["batches"])
        model.n_per_batch_ = np.array(doc["n_per_batch"], dtype=int)
        model.n_features_in_ = p
        model.alpha_, model.sigma_ = arr(doc["alpha"], 1), arr(doc["sigma"], 1)
        model.beta_ = arr(doc["beta"], 2).reshape(-1, p)
        for name in ("gamma_hat", "delta_hat2", "gamma_star", "delta_star"):
            setattr(model, name + "_", arr(doc[name], 2))
        for name in ("gamma_bar", "tau2_bar", "lambda_bar", "theta_bar"):
            setattr(model, name + "_", arr(doc[name], 1))
        model.n_iter_ = np.array(doc["n_iter"], dtype=int)
        return model

    @classmethod
    def from_json(cls, text: str) -> "ComBat":
        return cls.from_dict(json.loads(text))


def covariate_matrix(table: MetricTable) -> np.ndarray:
    """Columns age, male indicator, case indicator."""
    return np.column_stack([table.age, (table.sex == "male").astype(float),
                            (table.group == "case").astype(float)])


def _warn_single_group(table: MetricTable):
    for study in sorted(set(table.study)):
        groups = set(table.group[table.study == study])
        if len(groups) == 1:
            logger.warning("study %s contains only %s sessions; group and site effects are confounded",
                           study, groups.pop())


def fit_table(table: MetricTable, features=None, **params) -> ComBat:
    """Fit ComBat on ``features`` of a metric table with study as batch.

    Covariates are age, sex and case/control status.
    """
    features = list(table.columns if features is None else features)
    sub = table.select(features)
    _warn_single_group(table)
    model = ComBat(**params).fit(sub.values, table.study, covariate_matrix(table))
    model.feature_names_ = features
    model.covariate_names_ = list(COVARIATE_NAMES)
    return model


def harmonize_table(model: ComBat, table: MetricTable) -> MetricTable:
    """Apply a fitted model to its features; other columns pass through unchanged."""
    features = list(model.feature_names_)
    values = np.array(table.values)
    idx = [table.columns.index(f) for f in features]
    values[:, idx] = model.transform(values[:, idx], table.study, covariate_matrix(table))
    return table.with_values(values)
