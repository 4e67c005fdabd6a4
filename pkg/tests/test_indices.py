import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodal.data import FLOOD, NODATA, NONFLOOD, LabelMask, Tile
from floodal.indices import (
    INDEX_COLUMNS,
    boundary_pixels,
    compute_bpr,
    compute_fpr,
    compute_indices,
    compute_mdf,
    write_index_table,
)


def bpr_oracle(classes):
    h, w = classes.shape
    valid = bps = 0
    for i in range(h):
        for j in range(w):
            c = classes[i, j]
            if c == NODATA:
                continue
            valid += 1
            found = False
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if (di or dj) and 0 <= i + di < h and 0 <= j + dj < w:
                        n = classes[i + di, j + dj]
                        if n != NODATA and n != c:
                            found = True
            bps += found
    return bps / valid


def mdf_oracle(pixels, classes):
    x = pixels.reshape(pixels.shape[0], -1).astype(np.float64).T
    cls = classes.ravel()
    f, d = x[cls == FLOOD], x[cls == NONFLOOD]
    if not len(f) or not len(d):
        return None
    v = x[cls != NODATA]
    centred = v - v.mean(axis=0)
    sigma = centred.T @ centred / (len(v) - 1)
    diff = f.mean(axis=0) - d.mean(axis=0)
    return math.sqrt(diff @ np.linalg.inv(sigma) @ diff)


def random_pair(rng, h=None, w=None, nodata=0.1):
    h = h or int(rng.integers(3, 10))
    w = w or int(rng.integers(3, 10))
    classes = (rng.random((h, w)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
    classes[rng.random((h, w)) < nodata] = NODATA
    classes[0, 0], classes[-1, -1] = FLOOD, NONFLOOD
    return Tile("t", "", rng.random((3, h, w))), LabelMask(classes)


class TestBPR:
    def test_checkerboard_is_all_boundary(self):
        m = LabelMask(np.indices((4, 4)).sum(0) % 2)
        assert compute_bpr(m)[0] == 1.0

    def test_uniform_mask_has_no_boundary(self):
        assert compute_bpr(LabelMask(np.ones((5, 5))))[0] == 0.0

    def test_half_split(self):
        classes = np.zeros((4, 4), dtype=np.uint8)
        classes[:, 2:] = FLOOD
        bpr, bps, tps = compute_bpr(LabelMask(classes))
        assert (bps, tps) == (8, 16) and bpr == 0.5

    def test_nodata_never_counts(self):
        classes = np.array([[0, 255, 1]])
        bpr, bps, tps = compute_bpr(LabelMask(classes))
        assert (bps, tps) == (0, 2)
        assert not boundary_pixels(LabelMask(classes))[0, 1]

    def test_all_nodata(self):
        with pytest.raises(ValueError):
            compute_bpr(LabelMask(np.full((2, 2), NODATA)))

    @settings(max_examples=60)
    @given(st.integers(0, 100_000))
    def test_matches_loop_oracle(self, seed):
        _, mask = random_pair(np.random.default_rng(seed))
        assert compute_bpr(mask)[0] == pytest.approx(bpr_oracle(mask.classes), abs=1e-12)

    @settings(max_examples=30)
    @given(st.integers(0, 100_000))
    def test_symmetric_under_class_swap(self, seed):
        _, mask = random_pair(np.random.default_rng(seed))
        swapped = mask.classes.copy()
        swapped[mask.classes == FLOOD] = NONFLOOD
        swapped[mask.classes == NONFLOOD] = FLOOD
        assert compute_bpr(mask)[0] == compute_bpr(LabelMask(swapped))[0]


class TestFPR:
    def test_counts(self):
        fpr, fps, tps = compute_fpr(LabelMask(np.array([[1, 1, 0, 255]])))
        assert (fps, tps) == (2, 3) and fpr == pytest.approx(2 / 3)

    @settings(max_examples=40)
    @given(st.integers(0, 100_000))
    def test_complement(self, seed):
        _, mask = random_pair(np.random.default_rng(seed))
        valid = mask.classes != NODATA
        dry = (mask.classes == NONFLOOD).sum() / valid.sum()
        assert compute_fpr(mask)[0] + dry == pytest.approx(1.0)


class TestMDF:
    def test_single_class_is_undefined(self):
        tile = Tile("t", "", np.random.default_rng(0).random((3, 4, 4)))
        assert compute_mdf(tile, LabelMask(np.zeros((4, 4)))) is None

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            compute_mdf(Tile("t", "", np.zeros((3, 2, 2))), LabelMask(np.zeros((3, 3))))

    def test_singular_covariance_gets_ridge(self):
        px = np.zeros((3, 4, 4))
        classes = np.zeros((4, 4), dtype=np.uint8)
        classes[:, :2] = FLOOD
        px[0][classes == FLOOD] = 0.5  # only one band varies
        value = compute_mdf(Tile("t", "", px), LabelMask(classes))
        assert value is not None and np.isfinite(value) and value > 0

    def test_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            tile, mask = random_pair(rng)
            assert compute_mdf(tile, mask) == pytest.approx(mdf_oracle(tile.pixels, mask.classes), rel=1e-9)

    @settings(max_examples=40)
    @given(st.integers(0, 100_000))
    def test_invariant_under_affine_maps(self, seed):
        rng = np.random.default_rng(seed)
        tile, mask = random_pair(rng, 8, 8)
        a = 0.3 * np.eye(3) + 0.05 * rng.uniform(-1, 1, (3, 3))
        moved = np.einsum("ij,jhw->ihw", a, tile.pixels.astype(np.float64)) + 0.5
        before = compute_mdf(tile, mask)
        after = compute_mdf(Tile("t", "", moved), mask)
        assert after == pytest.approx(before, rel=1e-4)


def test_compute_indices_and_table(tmp_path):
    tile, mask = random_pair(np.random.default_rng(1), 6, 6)
    ind = compute_indices(tile, mask)
    assert ind.bps <= ind.tps and ind.fps <= ind.tps
    write_index_table([ind, ind], tmp_path / "i.csv")
    rows = list(csv.reader(open(tmp_path / "i.csv")))
    assert rows[0] == INDEX_COLUMNS
    assert len(rows) == 3 and all(len(r) == len(INDEX_COLUMNS) for r in rows)
    assert float(rows[1][1]) == ind.bpr
