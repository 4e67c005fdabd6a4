"""Evaluation metrics and the interpretation statistics layer.

Confusion counts and F1 follow the flood-positive convention with no-data
labels scored as non-flood.  Correlations, the 2D KDE and its
iso-proportion levels, and marching-squares contours live here too.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as _sps

from .data import FLOOD, LabelMask

# ---------------------------------------------------------------------------
# Segmentation metrics
# ---------------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion(pred: LabelMask | np.ndarray, label: LabelMask) -> ConfusionCounts:
    p = pred.classes if isinstance(pred, LabelMask) else np.asarray(pred)
    if p.shape != label.classes.shape:
        raise ValueError(f"prediction {p.shape} and label {label.classes.shape} differ in shape")
    pf = p == FLOOD
    gf = label.classes == FLOOD  # no-data counts as ground-truth non-flood
    return ConfusionCounts(int((pf & gf).sum()), int((pf & ~gf).sum()),
                           int((~pf & gf).sum()), int((~pf & ~gf).sum()))


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def f1(counts: ConfusionCounts) -> tuple[float, float, float]:
    """(precision, recall, f1); any 0/0 is taken as 0."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return precision, recall, _ratio(2 * precision * recall, precision + recall)


def aggregate_f1(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (divide by N)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate_f1: no values")
    mean = float(v.mean())
    return mean, float(np.sqrt(((v - mean) ** 2).mean()))


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    a = np.asarray(x, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a))
    sorted_a = a[order]
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson's r, or None when either input is constant."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("pearson: inputs differ in length")
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    sa = math.fsum(da * da)
    sb = math.fsum(db * db)
    if sa == 0 or sb == 0:
        return None
    r = math.fsum(da * db) / math.sqrt(sa * sb)
    return max(-1.0, min(1.0, r))


@dataclass
class CorrelationResult:
    rho: float | None
    p_value: float | None
    n: int


def _t_pvalue(r: float, n: int) -> float:
    if abs(r) >= 1:
        return 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return float(2 * _sps.t.sf(abs(t), n - 2))


def _exact_pvalue(rx: np.ndarray, ry: np.ndarray, rho: float) -> float:
    """Two-sided permutation p-value by counting sum(rx * ry[perm]) over all permutations.

    Ranks are doubled so tied (half-integer) ranks become integers; a subset
    DP over used y-positions keeps n <= 12 tractable.
    """
    n = len(rx)
    a = np.rint(2 * rx).astype(int)
    b = np.rint(2 * ry).astype(int)
    smax = int(np.sort(a) @ np.sort(b)) + 1
    dp = np.zeros((1 << n, smax), dtype=np.float64)
    dp[0, 0] = 1
    for mask in range(1 << n):
        row = dp[mask]
        if not row.any():
            continue
        pos = bin(mask).count("1")
        if pos == n:
            continue
        for j in range(n):
            if mask >> j & 1:
                continue
            shift = a[pos] * b[j]
            dp[mask | 1 << j, shift:] += row[:smax - shift]
    counts = dp[(1 << n) - 1]
    sums = np.arange(smax) / 4.0
    ma, mb = rx.mean(), ry.mean()
    sa = math.sqrt(((rx - ma) ** 2).sum())
    sb = math.sqrt(((ry - mb) ** 2).sum())
    rhos = (sums - n * ma * mb) / (sa * sb)
    hit = np.abs(rhos) >= abs(rho) - 1e-12
    return float(counts[hit].sum() / counts.sum())


def spearman(x: Sequence[float], y: Sequence[float], method: str = "t") -> CorrelationResult:
    """Spearman's rho (Pearson of average ranks) with a two-sided p-value.

    ``method="t"`` uses the t approximation; ``method="exact"`` enumerates
    the permutation distribution and is limited to n <= 12.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("spearman: inputs differ in length")
    n = a.size
    if n < 3:
        raise ValueError("spearman needs at least 3 pairs")
    rx, ry = average_ranks(a), average_ranks(b)
    rho = pearson(rx, ry)
    if rho is None:
        return CorrelationResult(None, None, n)
    if method == "t":
        p = _t_pvalue(rho, n)
    elif method == "exact":
        if n > 12:
            raise ValueError("exact Spearman p-values are limited to n <= 12")
        p = _exact_pvalue(rx, ry, rho)
    else:
        raise ValueError(f"unknown method {method!r}")
    return CorrelationResult(rho, p, n)


@dataclass
class SplitPearson:
    r_below: float | None
    r_at_or_above: float | None
    n_below: int
    n_at_or_above: int
    threshold: float


def split_pearson(fpr: Sequence[float], bpr: Sequence[float], threshold: float = 0.5,
                  min_size: int = 3) -> SplitPearson:
    """Pearson(FPR, BPR) separately for FPR < threshold and FPR >= threshold."""
    f = np.asarray(fpr, dtype=np.float64)
    b = np.asarray(bpr, dtype=np.float64)
    lo = f < threshold
    hi = ~lo
    r_lo = pearson(f[lo], b[lo]) if lo.sum() >= min_size else None
    r_hi = pearson(f[hi], b[hi]) if hi.sum() >= min_size else None
    return SplitPearson(r_lo, r_hi, int(lo.sum()), int(hi.sum()), threshold)


# ---------------------------------------------------------------------------
# 2D kernel density
# ---------------------------------------------------------------------------

BANDWIDTH_FLOOR = 1e-6
DEFAULT_LEVELS = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class DensityField:
    grid: np.ndarray  # (G, G), rows follow y, columns follow x
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    bandwidths: tuple[float, float]
    mass: float  # Riemann mass of the unnormalized estimate over the grid

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def cell_area(self) -> float:
        gy, gx = self.grid.shape
        return (self.x_range[1] - self.x_range[0]) / gx * (self.y_range[1] - self.y_range[0]) / gy

    @property
    def x_centers(self) -> np.ndarray:
        gx = self.grid.shape[1]
        lo, hi = self.x_range
        return lo + (np.arange(gx) + 0.5) * (hi - lo) / gx

    @property
    def y_centers(self) -> np.ndarray:
        gy = self.grid.shape[0]
        lo, hi = self.y_range
        return lo + (np.arange(gy) + 0.5) * (hi - lo) / gy

    def total_mass(self) -> float:
        return float(self.grid.sum() * self.cell_area)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "bandwidths": list(self.bandwidths), "mass": self.mass,
                "grid": self.grid.tolist()}


def scott_bandwidth(values: np.ndarray) -> float:
    n = len(values)
    return n ** (-1.0 / 6.0) * float(np.std(values, ddof=1))


def kde2d(points: np.ndarray, grid_size: int = 128, bandwidth: str = "scott",
          padding: float = 3.0) -> DensityField:
    """Product-Gaussian KDE evaluated at grid-cell centres and normalized to unit mass.

    The grid spans the data range padded by ``padding`` bandwidths per axis.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("kde2d needs at least two (x, y) points")
    if bandwidth != "scott":
        raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
    bws = []
    for axis in range(2):
        bw = scott_bandwidth(pts[:, axis])
        if not bw > BANDWIDTH_FLOOR:
            warnings.warn(f"degenerate spread on axis {axis}; bandwidth floored to {BANDWIDTH_FLOOR}")
            bw = BANDWIDTH_FLOOR
        bws.append(bw)
    bx, by = bws
    x_range = (pts[:, 0].min() - padding * bx, pts[:, 0].max() + padding * bx)
    y_range = (pts[:, 1].min() - padding * by, pts[:, 1].max() + padding * by)
    xc = x_range[0] + (np.arange(grid_size) + 0.5) * (x_range[1] - x_range[0]) / grid_size
    yc = y_range[0] + (np.arange(grid_size) + 0.5) * (y_range[1] - y_range[0]) / grid_size
    kx = np.exp(-0.5 * ((xc[None, :] - pts[:, :1]) / bx) ** 2) / (math.sqrt(2 * math.pi) * bx)
    ky = np.exp(-0.5 * ((yc[None, :] - pts[:, 1:]) / by) ** 2) / (math.sqrt(2 * math.pi) * by)
    dens = ky.T @ kx / len(pts)
    cell = (x_range[1] - x_range[0]) / grid_size * (y_range[1] - y_range[0]) / grid_size
    raw_mass = float(dens.sum() * cell)
    grid = dens / raw_mass if raw_mass > 0 else dens
    return DensityField(grid, x_range, y_range, (bx, by), raw_mass)


def iso_proportion_levels(field: DensityField, levels: Sequence[float] = DEFAULT_LEVELS) -> np.ndarray:
    """Density thresholds t(L) whose superlevel set {density >= t} holds mass 1 - L."""
    dens = field.grid.ravel()
    order = np.argsort(-dens, kind="mergesort")
    sorted_d = dens[order]
    cum = np.cumsum(sorted_d * field.cell_area)
    cum /= cum[-1]
    out = []
    for level in levels:
        idx = int(np.searchsorted(cum, 1 - level - 1e-12))
        out.append(sorted_d[min(idx, len(sorted_d) - 1)])
    return np.array(out)


def enclosed_mass(field: DensityField, threshold: float) -> float:
    return float(field.grid[field.grid >= threshold].sum() * field.cell_area)


# ---------------------------------------------------------------------------
# Marching squares
# ---------------------------------------------------------------------------

# corners: 0=(r,c) 1=(r,c+1) 2=(r+1,c+1) 3=(r+1,c); edges: 0=0-1 1=1-2 2=2-3 3=3-0
_SEGMENTS = {
    1: [(3, 0)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)], 6: [(0, 2)], 7: [(3, 2)],
    8: [(2, 3)], 9: [(0, 2)], 11: [(1, 2)], 12: [(1, 3)], 13: [(0, 1)], 14: [(3, 0)],
}
_SADDLE = {
    (5, True): [(0, 1), (2, 3)], (5, False): [(3, 0), (1, 2)],
    (10, True): [(3, 0), (1, 2)], (10, False): [(0, 1), (2, 3)],
}


def contour_polylines(field: DensityField, threshold: float) -> list[np.ndarray]:
    """Isolines of ``field`` at ``threshold`` as (M, 2) arrays of (x, y) points.

    Linear interpolation along cell edges; saddle cells are resolved by
    comparing the mean of the four corners with the threshold.  Closed loops
    repeat their first point at the end.
    """
    z = field.grid
    xs, ys = field.x_centers, field.y_centers
    above = z >= threshold
    gy, gx = z.shape
    case = (above[:-1, :-1].astype(int) | above[:-1, 1:] << 1
            | above[1:, 1:] << 2 | above[1:, :-1] << 3)

    def corner(r, c, k):
        return [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)][k]

    def edge_key(r, c, e):
        a, b = sorted([corner(r, c, e), corner(r, c, (e + 1) % 4)])
        return a, b

    points: dict = {}

    def edge_point(key):
        if key not in points:
            (r0, c0), (r1, c1) = key
            z0, z1 = z[r0, c0], z[r1, c1]
            f = (threshold - z0) / (z1 - z0) if z1 != z0 else 0.5
            points[key] = (xs[c0] + f * (xs[c1] - xs[c0]), ys[r0] + f * (ys[r1] - ys[r0]))
        return key

    adjacency: dict = {}
    segments = []
    for r, c in zip(*np.nonzero((case != 0) & (case != 15))):
        cs = int(case[r, c])
        if cs in (5, 10):
            centre = z[r:r + 2, c:c + 2].mean() >= threshold
            pairs = _SADDLE[(cs, bool(centre))]
        else:
            pairs = _SEGMENTS[cs]
        for e0, e1 in pairs:
            k0 = edge_point(edge_key(r, c, e0))
            k1 = edge_point(edge_key(r, c, e1))
            sid = len(segments)
            segments.append((k0, k1))
            adjacency.setdefault(k0, []).append(sid)
            adjacency.setdefault(k1, []).append(sid)

    used = [False] * len(segments)

    def walk(start_sid, start_key):
        chain = [start_key]
        sid, key = start_sid, start_key
        while True:
            used[sid] = True
            a, b = segments[sid]
            key = b if a == key else a
            chain.append(key)
            nxt = [s for s in adjacency[key] if not used[s]]
            if not nxt:
                return chain
            sid = nxt[0]

    lines = []
    # open chains start at edge points touched by a single segment
    for key, sids in sorted(adjacency.items()):
        if len(sids) == 1 and not used[sids[0]]:
            lines.append(walk(sids[0], key))
    for sid in range(len(segments)):
        if not used[sid]:
            lines.append(walk(sid, segments[sid][0]))
    return [np.array([points[k] for k in chain]) for chain in lines]
