"""Group comparisons: one-way ANOVA, GAMLSS likelihood-ratio tests,
subject-level bootstrap bands for centile curves and Benjamini-Yekutieli
false discovery rate control."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from ._errors import CohortForgeError, NumericalError, ValidationError
from .gamlss import GamlssGG, design_frame

logger = logging.getLogger(__name__)

NESTING_SLACK = 1e-6
MAX_FAILED_FRACTION = 0.10


@dataclass(frozen=True)
class TestResult:
    """Outcome of one test.

    ``df`` is the (numerator) degrees of freedom; ``df2`` holds the
    denominator degrees of freedom of an F test.  ``q`` and ``rejected``
    are filled in by :func:`apply_fdr`.
    """

    __test__ = False  # not a pytest class

    metric: str
    statistic: float
    df: float
    p: float
    df2: float | None = None
    q: float | None = None
    rejected: bool | None = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p = {self.p} outside [0, 1]")
        if self.df < 0:
            raise ValueError(f"negative df {self.df}")
        if self.q is not None and self.q < self.p:
            raise ValueError("q-value below its p-value")


# -- ANOVA ---------------------------------------------------------------
def anova_oneway(groups, metric: str = "") -> TestResult:
    """Classic one-way ANOVA F test.

    Parameters
    ----------
    groups : mapping or sequence of array-like
        Values per group (e.g. per study).  NaNs are dropped.
    """
    values = list(groups.values()) if isinstance(groups, dict) else list(groups)
    values = [np.asarray(v, dtype=float) for v in values]
    values = [v[~np.isnan(v)] for v in values]
    if len(values) < 2:
        raise ValidationError("SINGLE_GROUP", "ANOVA needs at least two groups")
    if any(len(v) < 2 for v in values):
        raise ValidationError("SMALL_GROUP", "every group needs at least two values")
    k = len(values)
    n = sum(len(v) for v in values)
    grand = np.concatenate(values).mean()
    ssb = sum(len(v) * (v.mean() - grand) ** 2 for v in values)
    ssw = sum(((v - v.mean()) ** 2).sum() for v in values)
    if ssw <= 0:
        raise ValidationError("ZERO_WITHIN_VARIANCE", "no variance within any group")
    df1, df2 = k - 1, n - k
    f = (ssb / df1) / (ssw / df2)
    return TestResult(metric, float(f), float(df1), float(stats.f.sf(f, df1, df2)), df2=float(df2))


def anova_by_study(table, metric: str, controls_only: bool = True) -> TestResult:
    """ANOVA of one metric-table column across studies."""
    values = table.column(metric)
    keep = ~np.isnan(values)
    if controls_only:
        keep &= table.group == "control"
    studies = table.study[keep]
    groups = {s: values[keep][studies == s] for s in sorted(set(studies))}
    return anova_oneway(groups, metric)


# -- likelihood ratio test ------------------------------------------------
def lrt(full, null, metric: str = "") -> TestResult:
    """Likelihood-ratio test of a fitted model against its nested null.

    The statistic is the deviance drop, referred to a chi-square with the
    difference in effective degrees of freedom.  Two identical fits give a
    zero statistic with ``p = 1``.
    """
    if full.n_samples_ != null.n_samples_:
        raise ValidationError("NOT_NESTED", f"fits use {full.n_samples_} and {null.n_samples_} rows")
    stat = null.deviance_ - full.deviance_
    df = full.edf_ - null.edf_
    if stat < 0:
        if stat < -NESTING_SLACK:
            raise NumericalError("NOT_NESTED", f"null deviance below full by {-stat:.3g}")
        stat = 0.0
    if df <= 0:
        if df == 0 and stat == 0:
            return TestResult(metric, 0.0, 0.0, 1.0)
        raise ValidationError("EDF_NOT_INCREASING", f"full model edf exceeds null by {df:.3g}")
    return TestResult(metric, float(stat), float(df), float(stats.chi2.sf(stat, df)))


# -- Benjamini-Yekutieli -------------------------------------------------
def harmonic(m: int) -> float:
    return float(np.sum(1.0 / np.arange(1, m + 1)))


def by_fdr(pvals, rate: float = 0.05):
    """Benjamini-Yekutieli step-up adjustment.

    Returns
    -------
    q : ndarray
        Adjusted values in the input order.
    rejected : ndarray of bool
        ``q <= rate``.
    """
    p = np.asarray(pvals, dtype=float).reshape(-1)
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise ValidationError("P_RANGE", "p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return np.empty(0), np.empty(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    raw = p[order] * m * harmonic(m) / np.arange(1, m + 1)
    q_sorted = np.minimum(np.minimum.accumulate(raw[::-1])[::-1], 1.0)
    q = np.empty(m)
    q[order] = q_sorted
    return q, q <= rate


def apply_fdr(results, rate: float = 0.05) -> list[TestResult]:
    """Attach BY q-values and rejection flags to a family of results."""
    results = list(results)
    q, rejected = by_fdr([r.p for r in results], rate)
    return [replace(r, q=float(qi), rejected=bool(ri)) for r, qi, ri in zip(results, q, rejected)]


def results_csv(results) -> str:
    rows = [{"metric": r.metric, "statistic": r.statistic, "df": r.df, "p": r.p,
             "q": r.q, "rejected": r.rejected} for r in results]
    frame = pd.DataFrame(rows, columns=["metric", "statistic", "df", "p", "q", "rejected"])
    buf = io.StringIO()
    frame.to_csv(buf, index=False, lineterminator="\n", float_format="%.10g")
    return buf.getvalue()


# -- bootstrap -----------------------------------------------------------
def _resample(subjects, strata, rng):
    """Row indices of one stratified subject-level resample."""
    rows_of = {}
    stratum_of = {}
    for i, (s, g) in enumerate(zip(subjects, strata)):
        rows_of.setdefault(s, []).append(i)
        stratum_of.setdefault(s, g)
    by_stratum = {}
    for s, g in stratum_of.items():
        by_stratum.setdefault(g, []).append(s)
    picked = []
    for g in sorted(by_stratum):
        members = by_stratum[g]
        for j in rng.integers(0, len(members), size=len(members)):
            picked.extend(rows_of[members[j]])
    return np.array(picked, dtype=int)


def _median_curves(model, ages, sex, groups):
    with np.errstate(over="ignore"):
        return np.vstack([model.predict(design_frame(ages, np.full(len(ages), sex, dtype=object),
                                                     np.full(len(ages), g, dtype=object)))
                          for g in groups])


def _replicate(X, y, subjects, strata, params, ages, sex, groups, seed, b):
    rng = np.random.default_rng([seed, b])
    idx = _resample(subjects, strata, rng)
    try:
        model = GamlssGG(**params).fit(X[idx], y[idx])
    except CohortForgeError as exc:
        logger.debug("bootstrap replicate %d failed: %s", b, exc)
        return None
    curves = _median_curves(model, ages, sex, groups)
    if not np.isfinite(curves).all():
        # a degenerate refit whose curves blow up counts as a failed replicate
        logger.debug("bootstrap replicate %d gave non-finite medians", b)
        return None
    return curves


def bootstrap_bands(X, y, subjects, strata, params=None, B=200, ages=None, seed=0,
                    sex="female", groups=("control", "case"), n_jobs=1):
    """Percentile bands of the fitted median curve by subject bootstrap.

    Subjects (with all their rows) are drawn with replacement within each
    stratum, the model is refitted, and the 2.5/97.5 percentiles of the
    replicate medians are taken per grid age.  Refits that raise, or whose
    medians are not finite on the grid, are dropped and counted; more than
    10% of them is an error.  Replicate ``b`` draws from
    ``default_rng([seed, b])`` so the result does not depend on ``n_jobs``.

    Parameters
    ----------
    X, y : array-like
        Design (``age, sex_male, group_case``) and response.
    subjects, strata : array-like
        Subject identifier and stratum label per row.
    params : dict, optional
        :class:`GamlssGG` parameters.
    ages : array-like
        Grid; defaults to 15..90 in steps of 1.

    Returns
    -------
    pandas.DataFrame
        ``age, group, sex, lower, upper, point_estimate``; ``attrs`` holds
        ``n_failed``.
    """
    if B < 1:
        raise ValidationError("BAD_B", "need at least one bootstrap replicate")
    params = dict(params or {})
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    subjects = np.asarray(subjects, dtype=object)
    strata = np.asarray(strata, dtype=object)
    if not (len(X) == len(y) == len(subjects) == len(strata)):
        raise ValidationError("LENGTH_MISMATCH", "X, y, subjects and strata differ in length")
    ages = np.arange(15.0, 91.0) if ages is None else np.asarray(ages, dtype=float).reshape(-1)
    if ages.size == 0:
        raise ValidationError("EMPTY_GRID", "age grid is empty")
    groups = list(groups)

    point = _median_curves(GamlssGG(**params).fit(X, y), ages, sex, groups)
    curves = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(X, y, subjects, strata, params, ages, sex, groups, seed, b)
        for b in range(B))
    ok = [c for c in curves if c is not None]
    n_failed = B - len(ok)
    if n_failed > MAX_FAILED_FRACTION * B:
        raise NumericalError("BOOTSTRAP_FAILURES", f"{n_failed} of {B} bootstrap refits failed")
    if n_failed:
        logger.warning("%d of %d bootstrap refits failed and were dropped", n_failed, B)
    stack = np.stack(ok)
    lower, upper = np.percentile(stack, [2.5, 97.5], axis=0)
    frames = [pd.DataFrame({"age": ages, "group": g, "sex": sex, "lower": lower[j],
                            "upper": upper[j], "point_estimate": point[j]})
              for j, g in enumerate(groups)]
    out = pd.concat(frames, ignore_index=True)
    out.attrs["n_failed"] = n_failed
    return out


def residual_anova(table, metric: str, controls_only: bool = True) -> TestResult:
    """ANOVA across studies of the residuals after regressing out age, sex and group.

    The regression uses every row with a value; the ANOVA is restricted to
    controls when ``controls_only`` is set.
    """
    values = table.column(metric)
    keep = ~np.isnan(values)
    C = np.column_stack([np.ones(len(values)), table.age, (table.sex == "male").astype(float),
                         (table.group == "case").astype(float)])
    coef = np.linalg.lstsq(C[keep], values[keep], rcond=None)[0]
    resid = np.full(len(values), np.nan)
    resid[keep] = values[keep] - C[keep] @ coef
    sel = keep & (table.group == "control") if controls_only else keep
    studies = table.study[sel]
    groups = {s: resid[sel][studies == s] for s in sorted(set(studies))}
    return anova_oneway(groups, metric)
