import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cohort_forge._errors import ValidationError
from cohort_forge.gamlss.model import smoother_edf
from cohort_forge.gamlss.splines import BSplineBasis, bspline_basis, difference_penalty

AGES = np.linspace(18, 90, 200)


@given(st.integers(0, 12), st.integers(1, 4))
def test_partition_of_unity(n_knots, degree):
    basis = BSplineBasis(n_knots, degree).fit(AGES)
    B = basis.transform(np.linspace(18, 90, 57))
    assert B.shape[1] == n_knots + degree + 1 == basis.n_basis_
    assert np.allclose(B.sum(axis=1), 1.0)
    assert (B >= -1e-14).all()


def test_linear_continuation_outside_boundary():
    basis = BSplineBasis(8).fit(AGES)
    coef = np.random.default_rng(0).normal(size=basis.n_basis_)
    below = basis.transform([0.0, 5.0, 10.0]) @ coef
    above = basis.transform([100.0, 120.0, 140.0]) @ coef
    assert np.diff(below, 2)[0] == pytest.approx(0.0, abs=1e-10)
    assert np.diff(above, 2)[0] == pytest.approx(0.0, abs=1e-10)
    # value and slope continue the curve at the boundary
    eps = 1e-6
    edge = basis.transform([90 - eps, 90.0, 90 + eps]) @ coef
    assert (edge[1] - edge[0]) == pytest.approx(edge[2] - edge[1], rel=1e-4)
    assert list(basis.outside([17.0, 50.0, 91.0])) == [True, False, True]


def test_from_knots_reproduces_basis():
    basis = BSplineBasis(6).fit(AGES)
    again = BSplineBasis.from_knots(basis.knots_, 3)
    x = np.array([0.0, 30.0, 95.0])
    assert np.array_equal(again.transform(x), basis.transform(x))


def test_difference_penalty_null_space():
    P = difference_penalty(8)
    assert np.allclose(P @ np.ones(8), 0)
    assert np.allclose(P @ np.arange(8.0), 0)
    assert np.linalg.matrix_rank(P) == 6
    B, P2 = bspline_basis(AGES, 5)
    assert P2.shape == (B.shape[1],) * 2


def test_edf_bounds_and_monotone_in_lambda():
    B, P = bspline_basis(AGES, 10)
    edfs = [smoother_edf(B, P, lam) for lam in (0.0, 0.1, 10.0, 1e3, 1e8)]
    assert edfs[0] == pytest.approx(B.shape[1])
    assert all(a > b for a, b in zip(edfs, edfs[1:]))
    # heavy smoothing leaves the linear null space
    assert edfs[-1] == pytest.approx(2.0, abs=1e-3)


@pytest.mark.parametrize("x, kw, code", [
    (np.full(30, 5.0), {}, "INSUFFICIENT_DISTINCT_X"),
    (np.array([1.0, np.nan] * 15), {}, "NON_FINITE"),
    (AGES, {"degree": 0}, "BAD_BASIS"),
])
def test_basis_errors(x, kw, code):
    with pytest.raises(ValidationError) as e:
        BSplineBasis(**{"n_interior_knots": 10, **kw}).fit(x)
    assert e.value.code == code
