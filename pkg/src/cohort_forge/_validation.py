"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np

from ._errors import ValidationError


def check_2d(X, name="X", allow_nan=True) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValidationError("BAD_SHAPE", f"{name} must be 2-D, got shape {X.shape}")
    if np.isinf(X).any() or (not allow_nan and np.isnan(X).any()):
        raise ValidationError("NON_FINITE", f"{name} contains non-finite values")
    return X


def check_1d(x, n=None, name="x", dtype=float) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        x = x.reshape(-1)
    if n is not None and len(x) != n:
        raise ValidationError("LENGTH_MISMATCH", f"{name} has {len(x)} entries, expected {n}")
    return x


def check_covariates(covariates, n) -> np.ndarray:
    if covariates is None:
        return np.zeros((n, 0))
    C = check_2d(covariates, "covariates")
    if len(C) != n:
        raise ValidationError("LENGTH_MISMATCH", f"covariates have {len(C)} rows, expected {n}")
    if np.isnan(C).any():
        raise ValidationError("MISSING_COVARIATE", "covariates contain missing values")
    return C


def check_is_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise ValidationError("NOT_FITTED", f"{type(estimator).__name__} is not fitted yet")
