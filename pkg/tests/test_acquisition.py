import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from floodal.acquisition import (
    AcquisitionScore,
    KMeansConfig,
    Orientation,
    bald_score,
    binary_entropy,
    entropy_map,
    entropy_score,
    kmeans,
    kmeans_select,
    margin_map,
    margin_score,
    pca,
    random_priorities,
    random_select,
    select_top,
)
from floodal.data import PoolState, Tile
from floodal.model import StochasticPrediction

probs = st.floats(0.0, 1.0, allow_nan=False)


def _pred(passes, tid="t"):
    return StochasticPrediction.from_passes(np.asarray(passes, dtype=np.float32), tid)


class TestScores:
    def test_uniform_limits(self):
        pred = _pred(np.full((10, 8, 8), 0.5))
        assert entropy_score(pred).score == pytest.approx(math.log(2), abs=1e-6)
        assert margin_score(pred).score == pytest.approx(0.0, abs=1e-6)
        assert bald_score(pred).score == pytest.approx(0.0, abs=1e-6)

    def test_certain_prediction(self):
        pred = _pred(np.ones((3, 4, 4)))
        assert entropy_score(pred).score < 1e-5
        assert margin_score(pred).score == pytest.approx(1.0, abs=1e-6)

    def test_orientations(self):
        pred = _pred(np.full((2, 2, 2), 0.3))
        assert entropy_score(pred).orientation is Orientation.HIGHER
        assert margin_score(pred).orientation is Orientation.LOWER
        assert margin_score(pred).uncertainty == -margin_score(pred).score

    def test_entropy_matches_formula(self):
        p = np.array([0.1, 0.25, 0.9])
        np.testing.assert_allclose(binary_entropy(p), -(p * np.log(p) + (1 - p) * np.log(1 - p)), rtol=1e-12)

    def test_bald_disagreement(self):
        # passes that confidently disagree carry the maximum mutual information
        passes = np.stack([np.full((2, 2), 1e-6), np.full((2, 2), 1 - 1e-6)])
        assert bald_score(_pred(passes)).score == pytest.approx(math.log(2), abs=1e-4)

    def test_valid_mask_restricts_mean(self):
        passes = np.array([[[0.5, 1.0]]], dtype=np.float32)
        valid = np.array([[True, False]])
        assert entropy_score(_pred(passes), valid).score == pytest.approx(math.log(2), abs=1e-6)

    @settings(max_examples=60)
    @given(arrays(np.float64, (5, 3, 3), elements=probs))
    def test_bald_nonnegative_and_bounded(self, passes):
        pred = _pred(passes)
        b = bald_score(pred).score
        assert -1e-6 <= b <= entropy_score(pred).score + 1e-6

    @settings(max_examples=60)
    @given(arrays(np.float64, (4, 4), elements=probs))
    def test_scores_in_range(self, p):
        pred = _pred(p[None])
        assert 0 <= entropy_score(pred).score <= math.log(2) + 1e-9
        assert 0 <= margin_score(pred).score <= 1 + 1e-9

    def test_pixel_rank_reversal(self):
        p = np.random.default_rng(0).random(10_000)
        pred = _pred(p.reshape(1, 100, 100))
        e = entropy_map(pred).ravel()
        m = margin_map(pred).ravel()
        order = np.argsort(e, kind="stable")
        assert np.all(np.diff(m[order]) <= 1e-12)


class TestSelection:
    def test_top_k_and_ties(self):
        scores = [AcquisitionScore(i, s, Orientation.HIGHER) for i, s in [("b", 1.0), ("a", 1.0), ("c", 0.5)]]
        assert select_top(scores, 2) == ["a", "b"]
        low = [AcquisitionScore(i, s, Orientation.LOWER) for i, s in [("b", 0.2), ("a", 0.9), ("c", 0.1)]]
        assert select_top(low, 2) == ["c", "b"]

    def test_errors(self):
        s = [AcquisitionScore("a", 1.0, Orientation.HIGHER)]
        with pytest.raises(ValueError):
            select_top(s, 2)
        with pytest.raises(ValueError):
            select_top([], 1)
        with pytest.raises(ValueError):
            select_top(s + [AcquisitionScore("b", 1.0, Orientation.LOWER)], 1)

    @settings(max_examples=40)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.data())
    def test_selection_is_sorted_prefix(self, values, data):
        k = data.draw(st.integers(1, len(values)))
        scores = [AcquisitionScore(f"t{i:02d}", v, Orientation.HIGHER) for i, v in enumerate(values)]
        chosen = select_top(scores, k)
        assert len(set(chosen)) == k
        cutoff = min(s.score for s in scores if s.tile_id in chosen)
        assert all(s.score <= cutoff for s in scores if s.tile_id not in chosen)

    def test_random_select(self):
        pool = PoolState([], [f"t{i}" for i in range(10)], [], [])
        a = random_select(pool, 4, 1)
        assert a == random_select(pool, 4, 1) and len(set(a)) == 4
        with pytest.raises(ValueError):
            random_select(pool, 11, 0)

    def test_random_priorities_uniform(self):
        ids = [f"t{i}" for i in range(10)]
        counts = dict.fromkeys(ids, 0)
        for seed in range(2000):
            prio = random_priorities(ids, seed)
            for tid in sorted(ids, key=prio.get)[:3]:
                counts[tid] += 1
        # each id is chosen with probability 3/10
        assert all(abs(c / 2000 - 0.3) < 0.05 for c in counts.values())


class TestPCAKMeans:
    def test_pca_matches_eigendecomposition(self):
        x = np.random.default_rng(0).normal(size=(50, 6)) @ np.diag([5, 3, 2, 1, 0.5, 0.1])
        res = pca(x, 3)
        evals = np.linalg.eigvalsh(np.cov(x.T))[::-1][:3]
        np.testing.assert_allclose(res.projected.var(axis=0, ddof=1), evals, rtol=1e-10)
        np.testing.assert_allclose(pca(x, 6).reconstruct(), x, atol=1e-10)

    def test_kmeans_recovers_blobs(self):
        rng = np.random.default_rng(1)
        centres = np.array([[0, 0], [10, 0], [0, 10]])
        pts = np.concatenate([c + rng.normal(0, 0.5, (30, 2)) for c in centres])
        res = kmeans(pts, 3, 100, np.random.default_rng(0))
        groups = [set(res.labels[i * 30:(i + 1) * 30]) for i in range(3)]
        assert all(len(g) == 1 for g in groups) and len(set.union(*groups)) == 3

    def test_kmeans_handles_duplicates(self):
        pts = np.zeros((5, 2))
        res = kmeans(pts, 3, 10, np.random.default_rng(0))
        assert len(res.labels) == 5

    def test_kmeans_select(self):
        rng = np.random.default_rng(2)
        tiles = [Tile(f"t{i:02d}", "", rng.random((3, 4, 4)) * (0.2 if i < 10 else 1)) for i in range(20)]
        cfg = KMeansConfig(n_components=4, k=5, seed=3)
        picks, dists = kmeans_select(tiles, cfg, return_details=True)
        assert len(set(picks)) == 5 and set(dists) == {t.id for t in tiles}
        assert kmeans_select(list(reversed(tiles)), cfg) == picks
        with pytest.raises(ValueError):
            kmeans_select(tiles, KMeansConfig(k=21))
