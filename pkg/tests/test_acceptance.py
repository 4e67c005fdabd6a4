"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible in
``pytest -v`` output) before asserting.  Criteria 7 and 9 share one benchmark
run of the margin and random arms: 200 pool tiles of 64x64, 30 initial tiles,
30 per iteration, 4 iterations, 5 runs, depth-2 network, T = 10.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from floodal import nn
from floodal.acquisition import bald_score, entropy_map, entropy_score, margin_map, margin_score
from floodal.cli import main
from floodal.data import FLOOD, NODATA, NONFLOOD, LabelMask, Tile
from floodal.indices import compute_bpr, compute_fpr, compute_mdf
from floodal.model import StochasticPrediction, UNet, UNetConfig, build_unet, mc_predict
from floodal.orchestrator import REPORT_CSVS, ExperimentConfig, corpus_indices, run_experiment
from floodal.stats import enclosed_mass, iso_proportion_levels, kde2d, pearson, spearman, split_pearson
from floodal.synth import generate_corpora

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------------------
# 1. gradient checks
# ---------------------------------------------------------------------------


def test_01_gradient_checks(verdict):
    start = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        depth = 1 + trial % 2
        net = UNet(UNetConfig(depth=depth, base_channels=2, dropout_rate=0.5), seed=trial, dtype=np.float64)
        for p in net.parameters():
            if p.value.ndim == 1:  # keep pre-activations off the ReLU kink
                p.value[...] = rng.normal(0, 0.1, p.value.shape)
        x = rng.random((2, 3, 8, 8))
        mask = (rng.random((2, 1, 1, 2)) >= 0.5) * 2.0
        report = nn.grad_check(net, x, dropout_mask=mask, max_entries=4, seed=trial)
        worst = max(worst, report.max_relative_error)
        # the loss head: BCE gradient against central differences
        prob = rng.uniform(0.05, 0.95, (1, 1, 4, 4))
        target = (rng.random(prob.shape) < 0.5).astype(float)
        _, grad = nn.bce_loss(prob, target)
        numeric = nn.numeric_gradient(lambda: nn.bce_loss(prob, target)[0], prob)
        worst = max(worst, float(nn.relative_error(grad, np.array([numeric[i] for i in np.ndindex(prob.shape)])
                                                   .reshape(prob.shape)).max()))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-3 and elapsed < 60,
            f"max relative error {worst:.2e} over 100 trials in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. acquisition limits
# ---------------------------------------------------------------------------


def test_02_uniform_and_deterministic_limits(verdict):
    uniform = StochasticPrediction.from_passes(np.full((10, 16, 16), 0.5, dtype=np.float32))
    ent = entropy_score(uniform).score
    mar = margin_score(uniform).score
    net = build_unet(UNetConfig(depth=2, base_channels=4, dropout_rate=0.0), 0)
    tile = Tile("t", "", np.random.default_rng(0).random((3, 16, 16)))
    bald = bald_score(mc_predict(net, tile, 10, 0)).score
    ok = abs(ent - math.log(2)) <= 1e-6 and abs(mar) <= 1e-6 and abs(bald) <= 1e-6
    verdict(2, ok, f"entropy-ln2 {ent - math.log(2):.1e}, margin {mar:.1e}, BALD without dropout {bald:.1e}")


# ---------------------------------------------------------------------------
# 3. pixel rank reversal
# ---------------------------------------------------------------------------


def test_03_entropy_margin_rank_reversal(verdict):
    p = np.random.default_rng(3).random(10_000).astype(np.float32)
    pred = StochasticPrediction.from_passes(p.reshape(1, 100, 100))
    e, m = entropy_map(pred).ravel(), margin_map(pred).ravel()
    by_entropy = np.argsort(-e, kind="stable")
    by_margin = np.argsort(m, kind="stable")
    same = np.array_equal(by_entropy, by_margin)
    verdict(3, same, f"descending-entropy order equals ascending-margin order on {p.size} pixels: {same}")


# ---------------------------------------------------------------------------
# 4. tile indices against brute force
# ---------------------------------------------------------------------------


def _brute_bpr_fpr(classes):
    h, w = classes.shape
    valid = flood = boundary = 0
    for i in range(h):
        for j in range(w):
            c = classes[i, j]
            if c == NODATA:
                continue
            valid += 1
            flood += c == FLOOD
            hit = any(
                0 <= i + di < h and 0 <= j + dj < w and classes[i + di, j + dj] not in (NODATA, c)
                for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj)
            boundary += hit
    return boundary / valid, flood / valid


def _brute_mdf(pixels, classes):
    cols = [pixels[:, i, j].astype(np.float64) for i in range(classes.shape[0])
            for j in range(classes.shape[1]) if classes[i, j] != NODATA]
    labels = [classes[i, j] for i in range(classes.shape[0])
              for j in range(classes.shape[1]) if classes[i, j] != NODATA]
    mean = sum(cols) / len(cols)
    sigma = sum(np.outer(v - mean, v - mean) for v in cols) / (len(cols) - 1)
    mf = np.mean([v for v, l in zip(cols, labels) if l == FLOOD], axis=0)
    md = np.mean([v for v, l in zip(cols, labels) if l == NONFLOOD], axis=0)
    d = mf - md
    return math.sqrt(d @ np.linalg.solve(sigma, d))


def test_04_indices_match_brute_force(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    worst_inv = 0.0
    for n in range(200):
        h, w = rng.integers(8, 25, 2)
        classes = (rng.random((h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        classes[rng.random((h, w)) < 0.05] = NODATA
        classes[0, 0], classes[-1, -1] = FLOOD, NONFLOOD
        pixels = rng.random((3, h, w)).astype(np.float32)
        mask = LabelMask(classes)
        bpr, fpr = _brute_bpr_fpr(classes)
        mdf = compute_mdf(Tile(f"r{n}", "", pixels), mask)
        worst = max(worst, abs(compute_bpr(mask)[0] - bpr), abs(compute_fpr(mask)[0] - fpr),
                    abs(mdf - _brute_mdf(pixels, classes)))
        # an invertible map that keeps pixels inside [0, 1]
        a = 0.5 * np.eye(3) + rng.uniform(0, 0.1, (3, 3))
        moved = np.einsum("ij,jhw->ihw", a, pixels.astype(np.float64)) + rng.uniform(0, 0.2, (3, 1, 1))
        worst_inv = max(worst_inv, abs(compute_mdf(Tile("m", "", moved), mask) - mdf) / mdf)
    verdict(4, worst <= 1e-5 and worst_inv <= 1e-4,
            f"max |index - brute force| {worst:.1e}; MDF relative change under linear maps {worst_inv:.1e}")


# ---------------------------------------------------------------------------
# 5. correlations
# ---------------------------------------------------------------------------


def test_05_correlations_match_reference(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 80))
        x = rng.integers(0, 10, n).astype(float)
        y = 0.5 * x + rng.integers(0, 6, n)
        worst = max(worst, abs(spearman(x, y).rho - sps.spearmanr(x, y).statistic),
                    abs(pearson(x, y) - sps.pearsonr(x, y).statistic))
    textbook = spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]).rho
    verdict(5, worst <= 1e-10 and textbook == 0.8,
            f"max deviation from scipy {worst:.1e} over 100 tied vectors; textbook rho = {textbook}")


# ---------------------------------------------------------------------------
# 6. density estimate
# ---------------------------------------------------------------------------


def test_06_kde_mass_and_outer_level(verdict):
    rng = np.random.default_rng(6)
    worst_mass = worst_level = 0.0
    for _ in range(20):
        k = int(rng.integers(1, 4))
        centres = rng.uniform(-3, 3, (k, 2))
        n = int(rng.integers(50, 400))
        pts = centres[rng.integers(0, k, n)] + rng.normal(0, rng.uniform(0.2, 1.0, 2), (n, 2))
        field = kde2d(pts)
        worst_mass = max(worst_mass, abs(field.mass - 1))
        thr = float(iso_proportion_levels(field, [0.05])[0])
        # independent of the grid: draw from the kernel mixture and evaluate the exact kernel sum
        bx, by = field.bandwidths
        draws = pts[rng.integers(0, n, 4000)] + rng.normal(0, 1, (4000, 2)) * [bx, by]
        dens = np.mean(sps.norm.pdf(draws[:, None, 0], pts[None, :, 0], bx)
                       * sps.norm.pdf(draws[:, None, 1], pts[None, :, 1], by), axis=1) / field.mass
        worst_level = max(worst_level, abs(enclosed_mass(field, thr) - 0.95), abs(np.mean(dens >= thr) - 0.95))
    verdict(6, worst_mass <= 0.02 and worst_level <= 0.02,
            f"max |mass - 1| {worst_mass:.4f}; max |enclosed(L=0.05) - 0.95| {worst_level:.4f} "
            f"(grid and Monte Carlo)")


# ---------------------------------------------------------------------------
# 7 and 9. the benchmark
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def benchmark_corpora():
    return generate_corpora(json.loads((CONFIGS / "benchmark_data.json").read_text()))


@pytest.fixture(scope="module")
def benchmark(benchmark_corpora):
    base = json.loads((CONFIGS / "benchmark_experiment.json").read_text())
    pool, target = benchmark_corpora["pool"], benchmark_corpora["target"]
    reports, seconds = {}, {}
    for arm in ("margin", "random"):
        start = time.perf_counter()
        reports[arm] = run_experiment(ExperimentConfig.from_dict({**base, "acquisition": arm}), pool, target)
        seconds[arm] = time.perf_counter() - start
    return reports, seconds


@pytest.mark.slow
def test_07_correlation_signs_at_iteration_one(benchmark, verdict):
    reports, seconds = benchmark
    good_runs = 0
    lines = []
    for run in reports["margin"].runs:
        table = {(c["function"], c["index"]): c for c in run.iterations[1].correlations
                 if c["orientation"] == "uncertainty"}
        ok = all(table[(fn, "bpr")]["rho"] > 0 and table[(fn, "bpr")]["p_value"] < 0.05
                 and table[(fn, "mdf")]["rho"] < 0 and table[(fn, "mdf")]["p_value"] < 0.05
                 for fn in ("entropy", "margin"))
        good_runs += ok
        lines.append(f"run {run.run}: " + ", ".join(
            f"{fn} rho(BPR)={table[(fn, 'bpr')]['rho']:+.2f} rho(MDF)={table[(fn, 'mdf')]['rho']:+.2f}"
            for fn in ("entropy", "margin")))
    print("\n".join(lines))
    # the criterion needs iterations 0 and 1 only; their records do not depend on later iterations
    needed = sum(rec.wall_time for run in reports["margin"].runs for rec in run.iterations[:2])
    verdict(7, good_runs >= 4 and needed <= 600 * 1.2,
            f"{good_runs}/5 runs with the expected signs at p<0.05 ({needed:.0f}s for iterations 0-1 of 5 runs)")


def test_08_split_pearson_sign_change(verdict):
    start = time.perf_counter()
    corpora = generate_corpora(json.loads((CONFIGS / "benchmark_data.json").read_text()))
    idx = [i for i in corpus_indices(corpora["pool"]).values() if 0.02 < i.fpr < 0.9]
    s = split_pearson([i.fpr for i in idx], [i.bpr for i in idx])
    elapsed = time.perf_counter() - start
    ok = s.r_below is not None and s.r_below > 0 and s.r_at_or_above is not None and s.r_at_or_above < 0
    verdict(8, ok and elapsed < 60,
            f"r(FPR<0.5) = {s.r_below:+.3f} (n={s.n_below}), r(FPR>=0.5) = {s.r_at_or_above:+.3f} "
            f"(n={s.n_at_or_above}) in {elapsed:.1f}s")


@pytest.mark.slow
def test_09_margin_against_random(benchmark, verdict):
    reports, seconds = benchmark
    final = {arm: float(np.mean([r.iterations[-1].f1 for r in rep.runs])) for arm, rep in reports.items()}
    sel_bpr = {arm: float(np.mean([i.bpr for r in rep.runs for i in r.iterations[1].selected_indices]))
               for arm, rep in reports.items()}
    total = seconds["margin"] + seconds["random"]
    ok = final["margin"] >= final["random"] - 0.01 and sel_bpr["margin"] > sel_bpr["random"]
    verdict(9, ok and total <= 1800 * 1.2,
            f"final mF1 margin {final['margin']:.4f} vs random {final['random']:.4f}; "
            f"iteration-1 selected BPR margin {sel_bpr['margin']:.4f} vs random {sel_bpr['random']:.4f} "
            f"({total / 60:.1f} min for both arms)")


# ---------------------------------------------------------------------------
# 10 and 11. the command line
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def smoke_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    assert main(["gen-data", "--config", str(CONFIGS / "smoke_data.json"), "--out", str(root / "data")]) == 0
    return root


def _run(root, out):
    return main(["run", "--config", str(CONFIGS / "smoke_experiment.json"), "--pool", str(root / "data/pool"),
                 "--target", str(root / "data/target"), "--out", str(out)])


def test_10_reruns_are_byte_identical(smoke_data, verdict):
    codes = [_run(smoke_data, smoke_data / name) for name in ("a", "b")]
    files = ("report.json",) + REPORT_CSVS
    same = [(smoke_data / "a" / f).read_bytes() == (smoke_data / "b" / f).read_bytes() for f in files]
    verdict(10, codes == [0, 0] and all(same),
            f"{sum(same)}/{len(files)} output files byte-identical across two runs")


def test_11_command_chain(smoke_data, verdict, tmp_path):
    import csv
    import xml.etree.ElementTree as ET

    codes = [_run(smoke_data, tmp_path / "run"),
             main(["analyze", str(tmp_path / "run/report.json"), "--corpus", str(smoke_data / "data/pool"),
                   "--out", str(tmp_path / "analysis")]),
             main(["plot", "--kind", "mdf_bpr_density", "--inputs", str(tmp_path / "run/report.json"),
                   "--out", str(tmp_path / "density.svg")]),
             main(["plot", "--kind", "f1_curve", "--inputs", str(tmp_path / "run/report.json"),
                   "--out", str(tmp_path / "f1.svg")])]
    json.loads((tmp_path / "run/report.json").read_text())
    for f in list((tmp_path / "run").glob("*.csv")) + list((tmp_path / "analysis").glob("*.csv")):
        rows = list(csv.reader(open(f)))
        assert len(rows) >= 2 and len({len(r) for r in rows}) == 1, f
    for f in ("density.svg", "f1.svg"):
        assert ET.parse(tmp_path / f).getroot().tag.endswith("svg")
    verdict(11, codes == [0, 0, 0, 0], f"exit codes {codes}; JSON, CSV and SVG outputs parse")
