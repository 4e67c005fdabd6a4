"""Acquisition functions: entropy, margin, BALD, random and PCA + k-means, plus top-k selection."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .data import PoolState, Tile
from .model import StochasticPrediction
from .nn import PROB_CLAMP


class Orientation(str, Enum):
    HIGHER = "higher-is-informative"
    LOWER = "lower-is-informative"


@dataclass(frozen=True)
class AcquisitionScore:
    tile_id: str
    score: float
    orientation: Orientation

    @property
    def uncertainty(self) -> float:
        """Score oriented so that larger always means more informative."""
        return self.score if self.orientation is Orientation.HIGHER else -self.score


def binary_entropy(p: np.ndarray) -> np.ndarray:
    """Natural-log entropy of a Bernoulli(p) prediction, p clamped away from 0 and 1."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return -(p * np.log(p) + (1 - p) * np.log1p(-p))


def _tile_mean(pixel_values: np.ndarray, valid: np.ndarray | None) -> float:
    if valid is None:
        return float(pixel_values.mean())
    if not valid.any():
        return float(pixel_values.mean())
    return float(pixel_values[valid].mean())


def entropy_map(pred: StochasticPrediction) -> np.ndarray:
    return binary_entropy(pred.calibrated)


def margin_map(pred: StochasticPrediction) -> np.ndarray:
    # top-two class gap in the binary case: |p - (1 - p)|
    return np.abs(2 * np.asarray(pred.calibrated, dtype=np.float64) - 1)


def bald_map(pred: StochasticPrediction) -> np.ndarray:
    expected = binary_entropy(pred.passes).mean(axis=0)
    return binary_entropy(pred.calibrated) - expected


def entropy_score(pred: StochasticPrediction, valid: np.ndarray | None = None) -> AcquisitionScore:
    """Mean pixel entropy of the calibrated map (all pixels unless ``valid`` is given)."""
    return AcquisitionScore(pred.tile_id, _tile_mean(entropy_map(pred), valid), Orientation.HIGHER)


def margin_score(pred: StochasticPrediction, valid: np.ndarray | None = None) -> AcquisitionScore:
    return AcquisitionScore(pred.tile_id, _tile_mean(margin_map(pred), valid), Orientation.LOWER)


def bald_score(pred: StochasticPrediction, valid: np.ndarray | None = None) -> AcquisitionScore:
    """Mean pixel mutual information between the prediction and the dropout masks."""
    return AcquisitionScore(pred.tile_id, _tile_mean(bald_map(pred), valid), Orientation.HIGHER)


SCORE_FUNCTIONS = {
    "entropy": entropy_score,
    "margin": margin_score,
    "bald": bald_score,
}


def select_top(scores: Sequence[AcquisitionScore], k: int) -> list[str]:
    """The ``k`` most informative ids; ties go to the lexicographically smaller id."""
    if not scores:
        raise ValueError("select_top: no scores")
    if k > len(scores):
        raise ValueError(f"select_top: k={k} exceeds {len(scores)} scores")
    orientations = {s.orientation for s in scores}
    if len(orientations) != 1:
        raise ValueError("select_top: mixed score orientations")
    if orientations.pop() is Orientation.HIGHER:
        ranked = sorted(scores, key=lambda s: (-s.score, s.tile_id))
    else:
        ranked = sorted(scores, key=lambda s: (s.score, s.tile_id))
    return [s.tile_id for s in ranked[:k]]


def random_select(pool: PoolState, k: int, seed: int) -> list[str]:
    unlabeled = pool.unlabeled_ids
    if k > len(unlabeled):
        raise ValueError(f"random_select: k={k} exceeds {len(unlabeled)} unlabeled tiles")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(unlabeled), size=k, replace=False)
    return [unlabeled[i] for i in picks]


def random_priorities(ids: Sequence[str], seed: int) -> dict[str, float]:
    """Per-id uniform keys; the ``k`` smallest are a uniform draw without replacement."""
    rng = np.random.default_rng(seed)
    keys = rng.random(len(ids))
    return dict(zip(ids, keys.tolist()))


# ---------------------------------------------------------------------------
# PCA + k-means
# ---------------------------------------------------------------------------


@dataclass
class KMeansConfig:
    n_components: int = 32
    k: int = 100
    max_iters: int = 100
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.n_components < 1:
            errors.append("n_components must be >= 1")
        if self.k < 1:
            errors.append("k must be >= 1")
        if self.max_iters < 1:
            errors.append("max_iters must be >= 1")
        return errors


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # (n_components, D)
    projected: np.ndarray  # (N, n_components)

    def reconstruct(self) -> np.ndarray:
        return self.projected @ self.components + self.mean


def pca(data: np.ndarray, n_components: int) -> PCAResult:
    """Project mean-centred rows onto the leading right singular vectors."""
    x = np.asarray(data, dtype=np.float64)
    mean = x.mean(axis=0)
    centred = x - mean
    n_components = max(1, min(n_components, *centred.shape))
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    # fix the sign of each axis so results do not depend on the LAPACK build
    comps = vt[:n_components]
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(flip == 0, 1, flip)[:, None]
    return PCAResult(mean, comps, centred @ comps.T)


def _sq_dists(points: np.ndarray, centres: np.ndarray) -> np.ndarray:
    d = (points ** 2).sum(1)[:, None] - 2 * points @ centres.T + (centres ** 2).sum(1)[None]
    return np.maximum(d, 0)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of k distinct seeding points chosen by D^2 sampling."""
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        d2_free = d2.copy()
        d2_free[chosen] = 0
        total = d2_free.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2_free / total))
        else:
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return np.array(chosen)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    iterations: int


def kmeans(points: np.ndarray, k: int, max_iters: int, rng: np.random.Generator) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    An empty cluster is re-seeded with the member of the largest cluster that
    lies farthest from that cluster's centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    centroids = points[kmeans_plus_plus(points, k, rng)].copy()
    labels = np.full(n, -1)
    it = 0
    for it in range(1, max_iters + 1):
        new_labels = _sq_dists(points, centroids).argmin(axis=1)
        for _ in range(k):
            counts = np.bincount(new_labels, minlength=k)
            empty = np.flatnonzero(counts == 0)
            if not empty.size:
                break
            big = int(counts.argmax())
            members = np.flatnonzero(new_labels == big)
            far = members[_sq_dists(points[members], centroids[[big]])[:, 0].argmax()]
            if counts[big] <= 1:
                break
            new_labels[far] = empty[0]
            centroids[empty[0]] = points[far]
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
        if converged:
            break
    return KMeansResult(centroids, labels, it)


def kmeans_select(tiles: Sequence[Tile], config: KMeansConfig, return_details: bool = False):
    """Pick the tile nearest each k-means centroid in PCA space, ordered by cluster index."""
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    tiles = sorted(tiles, key=lambda t: t.id)
    if config.k > len(tiles):
        raise ValueError(f"kmeans_select: k={config.k} exceeds pool of {len(tiles)}")
    data = np.stack([t.pixels.ravel() for t in tiles]).astype(np.float64)
    reduced = pca(data, config.n_components).projected
    rng = np.random.default_rng(config.seed)
    result = kmeans(reduced, config.k, config.max_iters, rng)
    d2 = _sq_dists(reduced, result.centroids)
    taken: set[int] = set()
    picks = []
    for c in range(config.k):
        members = [i for i in np.flatnonzero(result.labels == c) if i not in taken]
        candidates = members if members else [i for i in range(len(tiles)) if i not in taken]
        best = min(candidates, key=lambda i: (d2[i, c], i))
        taken.add(best)
        picks.append(tiles[best].id)
    if return_details:
        own = d2[np.arange(len(tiles)), result.labels]
        return picks, {t.id: float(np.sqrt(v)) for t, v in zip(tiles, own)}
    return picks
