"""Static SVG centile plots.

Plots are written as plain SVG text with fixed number formatting so the
same inputs always give the same bytes.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 80, "right": 110, "top": 56, "bottom": 50}
COLORS = {"control": "#1f77b4", "case": "#d62728"}
FALLBACK_COLORS = ("#2ca02c", "#9467bd", "#8c564b", "#7f7f7f")


def q_annotation(q, rate: float = 0.05) -> str:
    """``q=0.200, not significant at 0.05`` style label."""
    if q is None or not np.isfinite(q):
        return "q=n/a"
    verdict = "significant" if q <= rate else "not significant"
    return f"q={q:.3f}, {verdict} at {rate:g}"


def _nice_ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    ticks = np.arange(start, hi + step * 1e-9, step)
    return ticks


def _fmt(v):
    return f"{v:.2f}"


def _label(v):
    return f"{v:.4g}"


def centile_svg(metric: str, ages, medians: dict, bands: dict | None = None, q=None,
                rate: float = 0.05, x_range=(15.0, 90.0)) -> str:
    """One metric's median curves per group with shaded bootstrap bands.

    Parameters
    ----------
    ages : array-like
        Shared age grid.
    medians : dict
        Group name -> fitted median at each grid age.
    bands : dict, optional
        Group name -> ``(lower, upper)`` arrays.
    """
    ages = np.asarray(ages, dtype=float)
    bands = bands or {}
    series = [np.asarray(v, dtype=float) for v in medians.values()]
    for lo, hi in bands.values():
        series += [np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)]
    finite = np.concatenate([s[np.isfinite(s)] for s in series]) if series else np.array([0.0, 1.0])
    y_lo, y_hi = float(finite.min()), float(finite.max())
    pad = 0.05 * (y_hi - y_lo) if y_hi > y_lo else max(abs(y_lo) * 0.05, 1e-12)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = x_range

    left, top = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return left + (np.asarray(x) - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return top + (1 - (np.asarray(y) - y_lo) / (y_hi - y_lo)) * ph

    def path(xs, ys):
        pts = [f"{_fmt(a)},{_fmt(b)}" for a, b in zip(sx(xs), sy(ys))]
        return "M" + " L".join(pts)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" '
        f'font-size="15">{escape(metric)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _nice_ticks(x_lo, x_hi, 5):
        x = sx(t)
        out.append(f'<line x1="{_fmt(x)}" y1="{top + ph}" x2="{_fmt(x)}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{top + ph + 18}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{_label(t)}</text>')
    for t in _nice_ticks(y_lo, y_hi, 5):
        y = sy(t)
        out.append(f'<line x1="{left - 5}" y1="{_fmt(y)}" x2="{left}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(y + 4)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{_label(t)}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">age (years)</text>')

    colors = {}
    for i, g in enumerate(medians):
        colors[g] = COLORS.get(g, FALLBACK_COLORS[i % len(FALLBACK_COLORS)])
    for g, (lo, hi) in bands.items():
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        ring = path(np.concatenate([ages, ages[::-1]]), np.concatenate([hi, lo[::-1]])) + " Z"
        out.append(f'<path d="{ring}" fill="{colors.get(g, "#999999")}" fill-opacity="0.2" stroke="none"/>')
    for g, ys in medians.items():
        out.append(f'<path d="{path(ages, ys)}" fill="none" stroke="{colors[g]}" stroke-width="2"/>')

    lx = left + pw + 12
    for i, g in enumerate(medians):
        y = top + 14 + 18 * i
        out.append(f'<line x1="{lx}" y1="{y - 4}" x2="{lx + 20}" y2="{y - 4}" stroke="{colors[g]}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{y}" font-family="sans-serif" font-size="12">{escape(g)} p50</text>')
    out.append(f'<text x="{WIDTH / 2:.1f}" y="42" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{escape(q_annotation(q, rate))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
