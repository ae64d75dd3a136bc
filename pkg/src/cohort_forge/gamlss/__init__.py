"""Generalized Gamma GAMLSS: distribution, P-spline bases and the RS fitter."""
from .distribution import gg_cdf, gg_gradient, gg_logpdf, gg_ppf, gg_rvs, theta
from .model import GamlssGG, design_frame, fit_nested_pair, null_params, smoother_edf
from .splines import BSplineBasis, bspline_basis, difference_penalty

__all__ = [
    "BSplineBasis", "GamlssGG", "bspline_basis", "design_frame", "difference_penalty",
    "fit_nested_pair", "gg_cdf", "gg_gradient", "gg_logpdf", "gg_ppf", "gg_rvs", "null_params",
    "smoother_edf", "theta",
]
