"""Hand-written SVG figures: iso-proportion density plots, F1 curves and correlation boxes.

Every figure is a plain string of SVG markup.  Coordinates are rounded to
three decimals so repeated renders are byte-identical.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .stats import DEFAULT_LEVELS, contour_polylines, iso_proportion_levels, kde2d

# Fixed colour per acquisition function so figures compare across runs.
PALETTE = {
    "random": "#7f7f7f",
    "kmeans": "#9467bd",
    "entropy": "#2ca02c",
    "margin": "#d62728",
    "bald": "#1f77b4",
}
FALLBACK_COLOURS = ("#ff7f0e", "#8c564b", "#e377c2", "#17becf", "#bcbd22")
# Contour level ramp, outermost (L = 0.95) to innermost (L = 0.05).
_RAMP = ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37))

WIDTH, HEIGHT = 560, 420
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 70, 140, 40, 60


def arm_colour(name: str, position: int = 0) -> str:
    return PALETTE.get(name, FALLBACK_COLOURS[position % len(FALLBACK_COLOURS)])


def level_colour(level: float) -> str:
    """Same level, same colour, in every density plot."""
    t = min(max((0.95 - level) / 0.9, 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(t), len(_RAMP) - 2)
    f = t - i
    rgb = [round(a + (b - a) * f) for a, b in zip(_RAMP[i], _RAMP[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _num(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


class _Frame:
    """Linear map from data coordinates to the SVG plot area (y grows upwards in data)."""

    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x0 + 0.5
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y0 + 0.5
        self.left = MARGIN_LEFT
        self.top = MARGIN_TOP
        self.w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
        self.h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
        self.sx = self.w / (self.x1 - self.x0)
        self.sy = -self.h / (self.y1 - self.y0)
        self.ox = self.left - self.x0 * self.sx
        self.oy = self.top + self.h - self.y0 * self.sy

    def px(self, x: float) -> float:
        return self.ox + x * self.sx

    def py(self, y: float) -> float:
        return self.oy + y * self.sy

    def transform_attr(self) -> str:
        # lets a reader map emitted geometry back to data units: X = (x - ox) / sx
        return f'data-transform="{float(self.sx)!r} {float(self.ox)!r} {float(self.sy)!r} {float(self.oy)!r}"'


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out


def _axes(frame: _Frame, xlabel: str, ylabel: str, title: str) -> list[str]:
    parts = [
        f'<rect x="{frame.left}" y="{frame.top}" width="{frame.w}" height="{frame.h}" '
        f'fill="none" stroke="#000000" stroke-width="1"/>',
    ]
    bottom = frame.top + frame.h
    for t in _ticks(frame.x0, frame.x1):
        x = _num(frame.px(t))
        parts.append(f'<line x1="{x}" y1="{bottom}" x2="{x}" y2="{bottom + 5}" stroke="#000000"/>')
        parts.append(f'<text x="{x}" y="{bottom + 18}" font-size="11" text-anchor="middle">{_num(t)}</text>')
    for t in _ticks(frame.y0, frame.y1):
        y = _num(frame.py(t))
        parts.append(f'<line x1="{frame.left - 5}" y1="{y}" x2="{frame.left}" y2="{y}" stroke="#000000"/>')
        parts.append(f'<text x="{frame.left - 8}" y="{y}" font-size="11" text-anchor="end" '
                     f'dominant-baseline="middle">{_num(t)}</text>')
    cx = _num(frame.left + frame.w / 2)
    cy = _num(frame.top + frame.h / 2)
    parts.append(f'<text x="{cx}" y="{HEIGHT - 15}" font-size="13" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="18" y="{cy}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 18 {cy})">{escape(ylabel)}</text>')
    parts.append(f'<text x="{cx}" y="22" font-size="14" text-anchor="middle">{escape(title)}</text>')
    return parts


def _document(parts: Sequence[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>', *parts, "</svg>"]) + "\n"


def _warning(text: str) -> str:
    return (f'<text class="warning" x="{_num(MARGIN_LEFT + 10)}" y="{MARGIN_TOP + 20}" '
            f'font-size="13" fill="#b00000">{escape(text)}</text>')


def density_svg(points: np.ndarray, xlabel: str, ylabel: str, title: str = "",
                levels: Sequence[float] = DEFAULT_LEVELS, grid_size: int = 128) -> str:
    """Iso-proportion contour plot of a 2D point set.

    One ``<g class="contour">`` group per level is always emitted, so a plot
    with too few points still has the full set of (empty) groups next to a
    warning annotation.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    pts = pts[np.isfinite(pts).all(axis=1)]
    levels = [float(l) for l in levels]
    warning = None
    field = None
    if len(pts) < 2:
        warning = f"warning: {len(pts)} point(s), density not estimated"
    elif np.ptp(pts[:, 0]) == 0 or np.ptp(pts[:, 1]) == 0:
        warning = "warning: degenerate spread, density not estimated"
    else:
        field = kde2d(pts, grid_size=grid_size)

    if field is not None:
        frame = _Frame(field.x_range, field.y_range)
    elif len(pts):
        frame = _Frame((pts[:, 0].min(), pts[:, 0].max()), (pts[:, 1].min(), pts[:, 1].max()))
    else:
        frame = _Frame((0.0, 1.0), (0.0, 1.0))

    parts = _axes(frame, xlabel, ylabel, title)
    parts.append(f'<g class="contours" {frame.transform_attr()} fill="none" stroke-width="1.2">')
    thresholds = iso_proportion_levels(field, levels) if field is not None else [None] * len(levels)
    for level, thr in zip(levels, thresholds):
        colour = level_colour(level)
        parts.append(f'<g class="contour" data-level="{level:.2f}" stroke="{colour}">')
        if thr is not None:
            for line in contour_polylines(field, float(thr)):
                d = " ".join(f"{'M' if i == 0 else 'L'}{_num(frame.px(x))},{_num(frame.py(y))}"
                             for i, (x, y) in enumerate(line))
                parts.append(f'<path d="{d}"/>')
        parts.append("</g>")
    parts.append("</g>")

    for x, y in pts:
        parts.append(f'<circle cx="{_num(frame.px(x))}" cy="{_num(frame.py(y))}" r="1.5" '
                     f'fill="#000000" fill-opacity="0.35"/>')

    lx = WIDTH - MARGIN_RIGHT + 12
    for n, level in enumerate(levels):
        y = MARGIN_TOP + 10 + n * 16
        parts.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 18}" y2="{y}" stroke="{level_colour(level)}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{y + 4}" font-size="10">L={level:.2f}</text>')
    if len(pts):
        mx, my = pts.mean(axis=0)
        parts.append(f'<text class="mean" x="{MARGIN_LEFT + 8}" y="{HEIGHT - MARGIN_BOTTOM - 26}" '
                     f'font-size="12">μ_x = {mx:.4f}</text>')
        parts.append(f'<text class="mean" x="{MARGIN_LEFT + 8}" y="{HEIGHT - MARGIN_BOTTOM - 10}" '
                     f'font-size="12">μ_y = {my:.4f}</text>')
    if warning:
        parts.append(_warning(warning))
    return _document(parts)


def curve_svg(series: Mapping[str, Sequence[tuple[float, float]]], ylabel: str, title: str = "",
              xlabel: str = "labeled tiles", baseline: float | None = None,
              full: float | None = None) -> str:
    """Per-arm polylines plus optional dashed horizontal baseline and full-data lines."""
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    ys += [v for v in (baseline, full) if v is not None]
    if not xs:
        frame = _Frame((0.0, 1.0), (0.0, 1.0))
        parts = _axes(frame, xlabel, ylabel, title)
        parts.append(_warning("warning: no data"))
        return _document(parts)
    ypad = max((max(ys) - min(ys)) * 0.08, 1e-3)
    frame = _Frame((min(xs), max(xs)), (min(ys) - ypad, max(ys) + ypad))
    parts = _axes(frame, xlabel, ylabel, title)
    x_lo, x_hi = _num(frame.px(frame.x0)), _num(frame.px(frame.x1))
    for name, value, colour in (("baseline", baseline, "#444444"), ("full", full, "#1f3fbf")):
        if value is not None:
            y = _num(frame.py(value))
            parts.append(f'<line class="{name}" x1="{x_lo}" y1="{y}" x2="{x_hi}" y2="{y}" '
                         f'stroke="{colour}" stroke-dasharray="6 4" stroke-width="1.5"/>')
    lx = WIDTH - MARGIN_RIGHT + 12
    for n, (name, pts) in enumerate(series.items()):
        colour = arm_colour(name, n)
        coords = " ".join(f"{_num(frame.px(x))},{_num(frame.py(y))}" for x, y in pts)
        parts.append(f'<polyline class="series" data-arm="{escape(name)}" points="{coords}" '
                     f'fill="none" stroke="{colour}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{_num(frame.px(x))}" cy="{_num(frame.py(y))}" r="3" fill="{colour}"/>')
        y = MARGIN_TOP + 10 + n * 18
        parts.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 18}" y2="{y}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 24}" y="{y + 4}" font-size="11">{escape(name)}</text>')
    return _document(parts)


def correlation_box_svg(groups: Mapping[str, Sequence[float]], title: str = "",
                        ylabel: str = "Spearman rho") -> str:
    """Box plot (quartiles, 1.5 IQR whiskers) of correlation coefficients per group."""
    values = [v for vs in groups.values() for v in vs if v is not None]
    lo = min(values + [-1.0]) if values else -1.0
    hi = max(values + [1.0]) if values else 1.0
    frame = _Frame((0.0, max(len(groups), 1)), (lo, hi))
    parts = _axes(frame, "", ylabel, title)
    zero = _num(frame.py(0.0))
    parts.append(f'<line x1="{frame.left}" y1="{zero}" x2="{frame.left + frame.w}" y2="{zero}" '
                 f'stroke="#999999" stroke-dasharray="3 3"/>')
    for n, (name, vs) in enumerate(groups.items()):
        arm = name.split(":")[0]
        colour = arm_colour(arm, n)
        cx = frame.px(n + 0.5)
        half = frame.w / max(len(groups), 1) * 0.3
        parts.append(f'<text x="{_num(cx)}" y="{frame.top + frame.h + 34}" font-size="10" '
                     f'text-anchor="middle">{escape(name)}</text>')
        v = np.array([x for x in vs if x is not None], dtype=np.float64)
        if not len(v):
            continue
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        iqr = q3 - q1
        wlo = v[v >= q1 - 1.5 * iqr].min()
        whi = v[v <= q3 + 1.5 * iqr].max()
        parts.append(f'<g class="box" data-group="{escape(name)}" stroke="{colour}" fill="none">')
        parts.append(f'<rect x="{_num(cx - half)}" y="{_num(frame.py(q3))}" width="{_num(2 * half)}" '
                     f'height="{_num(frame.py(q1) - frame.py(q3))}"/>')
        parts.append(f'<line x1="{_num(cx - half)}" y1="{_num(frame.py(med))}" x2="{_num(cx + half)}" '
                     f'y2="{_num(frame.py(med))}" stroke-width="2"/>')
        parts.append(f'<line x1="{_num(cx)}" y1="{_num(frame.py(q3))}" x2="{_num(cx)}" y2="{_num(frame.py(whi))}"/>')
        parts.append(f'<line x1="{_num(cx)}" y1="{_num(frame.py(q1))}" x2="{_num(cx)}" y2="{_num(frame.py(wlo))}"/>')
        for x in v[(v < wlo) | (v > whi)]:
            parts.append(f'<circle cx="{_num(cx)}" cy="{_num(frame.py(x))}" r="2"/>')
        parts.append("</g>")
    return _document(parts)
