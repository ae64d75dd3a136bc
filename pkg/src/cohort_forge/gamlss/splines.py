"""Cubic B-spline bases with second-order difference penalties (P-splines)."""
from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline

from .._errors import ValidationError


def difference_penalty(n_basis: int, order: int = 2) -> np.ndarray:
    """``D^T D`` for the ``order``-th difference matrix of ``n_basis`` coefficients."""
    D = np.diff(np.eye(n_basis), n=order, axis=0)
    return D.T @ D


class BSplineBasis:
    """Quantile-knot B-spline basis over one covariate.

    Interior knots sit at the ``j / (n_interior_knots + 1)`` quantiles of the
    training values; boundary knots at their min and max are repeated
    ``degree + 1`` times.  Outside the boundary each basis function continues
    linearly with its value and slope at the nearest boundary knot, so
    extrapolated curves cannot run away the way the end cubics would.
    """

    def __init__(self, n_interior_knots: int = 10, degree: int = 3):
        self.n_interior_knots = n_interior_knots
        self.degree = degree

    def fit(self, x) -> "BSplineBasis":
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.n_interior_knots < 0 or self.degree < 1:
            raise ValidationError("BAD_BASIS", "need n_interior_knots >= 0 and degree >= 1")
        if not np.isfinite(x).all() or x.size == 0:
            raise ValidationError("NON_FINITE", "spline covariate must be finite and non-empty")
        lo, hi = float(x.min()), float(x.max())
        probs = np.arange(1, self.n_interior_knots + 1) / (self.n_interior_knots + 1)
        interior = np.quantile(x, probs) if self.n_interior_knots else np.empty(0)
        grid = np.concatenate([[lo], interior, [hi]])
        if len(np.unique(x)) < self.n_interior_knots + 2 or (np.diff(grid) <= 0).any():
            raise ValidationError("INSUFFICIENT_DISTINCT_X",
                                  f"{len(np.unique(x))} distinct values cannot place "
                                  f"{self.n_interior_knots} interior knots")
        k = self.degree
        self.boundary_ = (lo, hi)
        self.interior_knots_ = interior
        self.knots_ = np.concatenate([[lo] * (k + 1), interior, [hi] * (k + 1)])
        self.n_basis_ = self.n_interior_knots + k + 1
        return self

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        lo, hi = self.knots_[0], self.knots_[-1]
        inside = np.clip(x, lo, hi)
        out = BSpline.design_matrix(inside, self.knots_, self.degree).toarray()
        below, above = x < lo, x > hi
        if below.any() or above.any():
            slopes = self._boundary_slopes()
            out[below] += (x[below] - lo)[:, None] * slopes[0]
            out[above] += (x[above] - hi)[:, None] * slopes[1]
        return out

    def _boundary_slopes(self) -> np.ndarray:
        eye = np.eye(len(self.knots_) - self.degree - 1)
        ends = [self.knots_[0], self.knots_[-1]]
        return np.array([BSpline(self.knots_, c, self.degree).derivative()(ends) for c in eye]).T

    def fit_transform(self, x) -> np.ndarray:
        return self.fit(x).transform(x)

    def penalty(self, order: int = 2) -> np.ndarray:
        return difference_penalty(self.n_basis_, order)

    def outside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.boundary_
        return (x < lo) | (x > hi)

    @classmethod
    def from_knots(cls, knots, degree: int = 3) -> "BSplineBasis":
        knots = np.asarray(knots, dtype=float)
        basis = cls(len(knots) - 2 * (degree + 1), degree)
        basis.knots_ = knots
        basis.interior_knots_ = knots[degree + 1:len(knots) - degree - 1]
        basis.boundary_ = (float(knots[0]), float(knots[-1]))
        basis.n_basis_ = len(knots) - degree - 1
        return basis


def bspline_basis(x, n_interior_knots: int, degree: int = 3):
    """Basis matrix at ``x`` and its order-2 difference penalty."""
    basis = BSplineBasis(n_interior_knots, degree)
    return basis.fit_transform(x), basis.penalty(2)
