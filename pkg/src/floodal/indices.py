"""Per-tile class-ambiguity (BPR, MDF) and class-imbalance (FPR) indices.

All three ignore no-data pixels: they are never boundary pixels, never
neighbours, and not counted in the valid-pixel total.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .data import FLOOD, NODATA, NONFLOOD, LabelMask, Tile

RIDGE = 1e-6

_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class AmbiguityIndices:
    tile_id: str
    bpr: float
    mdf: float | None
    fpr: float
    bps: int
    fps: int
    tps: int

    def row(self) -> list:
        return [self.tile_id, repr(self.bpr), "" if self.mdf is None else repr(self.mdf),
                repr(self.fpr), self.bps, self.fps, self.tps]


def _valid_count(mask: LabelMask) -> int:
    tps = int((mask.classes != NODATA).sum())
    if tps == 0:
        raise ValueError("mask has no valid pixels")
    return tps


def boundary_pixels(mask: LabelMask) -> np.ndarray:
    """Boolean map of valid pixels with a valid 8-neighbour of the other class."""
    cls = mask.classes
    h, w = cls.shape
    padded = np.full((h + 2, w + 2), NODATA, dtype=np.uint8)
    padded[1:-1, 1:-1] = cls
    centre_valid = cls != NODATA
    boundary = np.zeros((h, w), dtype=bool)
    for dy, dx in _NEIGHBOURS:
        nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        boundary |= (nb != NODATA) & (nb != cls)
    return boundary & centre_valid


def compute_bpr(mask: LabelMask) -> tuple[float, int, int]:
    tps = _valid_count(mask)
    bps = int(boundary_pixels(mask).sum())
    return bps / tps, bps, tps


def compute_fpr(mask: LabelMask) -> tuple[float, int, int]:
    tps = _valid_count(mask)
    fps = int((mask.classes == FLOOD).sum())
    return fps / tps, fps, tps


def compute_mdf(tile: Tile, mask: LabelMask) -> float | None:
    """Mahalanobis distance between flood and non-flood mean pixel vectors.

    The covariance is taken over all valid pixels of the tile.  Returns None
    when a class has no valid pixels or the covariance stays singular after
    adding the ridge.
    """
    if (tile.height, tile.width) != (mask.height, mask.width):
        raise ValueError("tile and mask dimensions differ")
    x = tile.pixels.reshape(tile.channels, -1).astype(np.float64)
    cls = mask.classes.ravel()
    flood = cls == FLOOD
    dry = cls == NONFLOOD
    if not flood.any() or not dry.any():
        return None
    diff = x[:, flood].mean(axis=1) - x[:, dry].mean(axis=1)
    valid = x[:, flood | dry]
    sigma = np.atleast_2d(np.cov(valid))
    try:
        factor = cho_factor(sigma)
    except LinAlgError:
        try:
            factor = cho_factor(sigma + RIDGE * np.eye(len(sigma)))
        except LinAlgError:
            return None
    quad = float(diff @ cho_solve(factor, diff))
    return math.sqrt(max(quad, 0.0))


def compute_indices(tile: Tile, mask: LabelMask) -> AmbiguityIndices:
    bpr, bps, tps = compute_bpr(mask)
    fpr, fps, _ = compute_fpr(mask)
    return AmbiguityIndices(tile.id, bpr, compute_mdf(tile, mask), fpr, bps, fps, tps)


INDEX_COLUMNS = ["tile_id", "bpr", "mdf", "fpr", "bps", "fps", "tps"]


def write_index_table(rows: Iterable[AmbiguityIndices], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_COLUMNS)
        for r in rows:
            w.writerow(r.row())
