"""The active-learning loop: train from scratch, evaluate, score the pool, acquire, repeat."""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .acquisition import (
    KMeansConfig,
    Orientation,
    SCORE_FUNCTIONS,
    kmeans_select,
    random_priorities,
    select_top,
)
from .data import Corpus, PoolState, build_pool
from .indices import AmbiguityIndices, compute_indices
from .model import (
    TrainConfig,
    TrainingDiverged,
    UNetConfig,
    build_unet,
    mc_predict_many,
    predict_binary,
    train,
)
from .seeding import derive_seed
from .stats import ConfusionCounts, aggregate_f1, confusion, f1, spearman

logger = logging.getLogger(__name__)

ACQUISITION_FUNCTIONS = ("random", "kmeans", "entropy", "margin", "bald")
UNCERTAINTY_FUNCTIONS = ("entropy", "margin", "bald")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _sub_config(cls, raw, prefix: str, errors: list[str]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        errors.append(f"{prefix}: expected an object")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            errors.append(f"{prefix}.{key}: unknown key")
            continue
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{prefix}.{key}: expected a boolean")
                continue
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                errors.append(f"{prefix}.{key}: expected an integer")
                continue
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{prefix}.{key}: expected a number")
                continue
            value = float(value)
        kwargs[key] = value
    obj = cls(**kwargs)
    errors.extend(f"{prefix}: {e}" for e in obj.validate())
    return obj


@dataclass
class ExperimentConfig:
    acquisition: str = "margin"
    n_initial: int = 100
    k_per_iteration: int = 100
    n_iterations: int = 4
    n_runs: int = 10
    T: int = 10
    seed: int = 0
    threshold: float = 0.5
    exclude_nodata_in_scores: bool = False
    full_baseline: bool = False
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)

    _SCALARS = {
        "acquisition": str, "n_initial": int, "k_per_iteration": int, "n_iterations": int,
        "n_runs": int, "T": int, "seed": int, "threshold": float,
        "exclude_nodata_in_scores": bool, "full_baseline": bool,
    }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        """Build and validate; every offending key is reported in one :class:`ConfigError`."""
        if not isinstance(raw, dict):
            raise ConfigError(["top level: expected an object"])
        errors: list[str] = []
        kwargs = {}
        for key, value in raw.items():
            if key in ("unet", "train", "kmeans"):
                continue
            kind = cls._SCALARS.get(key)
            if kind is None:
                errors.append(f"{key}: unknown key")
            elif kind is bool and not isinstance(value, bool):
                errors.append(f"{key}: expected a boolean")
            elif kind is int and (isinstance(value, bool) or not isinstance(value, int)):
                errors.append(f"{key}: expected an integer")
            elif kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
                errors.append(f"{key}: expected a number")
            elif kind is str and not isinstance(value, str):
                errors.append(f"{key}: expected a string")
            else:
                kwargs[key] = float(value) if kind is float else value
        kwargs["unet"] = _sub_config(UNetConfig, raw.get("unet"), "unet", errors)
        kwargs["train"] = _sub_config(TrainConfig, raw.get("train"), "train", errors)
        kwargs["kmeans"] = _sub_config(KMeansConfig, raw.get("kmeans"), "kmeans", errors)
        cfg = cls(**kwargs)
        errors.extend(cfg.validate())
        if errors:
            raise ConfigError(errors)
        return cfg

    def validate(self, pool_size: int | None = None) -> list[str]:
        errors = []
        if self.acquisition not in ACQUISITION_FUNCTIONS:
            errors.append(f"acquisition: must be one of {', '.join(ACQUISITION_FUNCTIONS)}")
        for key in ("n_initial", "k_per_iteration", "n_runs", "T"):
            if getattr(self, key) < 1:
                errors.append(f"{key}: must be >= 1")
        if self.n_iterations < 0:
            errors.append("n_iterations: must be >= 0")
        if not 0 < self.threshold < 1:
            errors.append("threshold: must be in (0, 1)")
        if pool_size is not None and self.n_initial + self.k_per_iteration * self.n_iterations > pool_size:
            errors.append(f"n_initial + k_per_iteration * n_iterations = "
                          f"{self.n_initial + self.k_per_iteration * self.n_iterations} "
                          f"exceeds pool size {pool_size}")
        return errors

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self._SCALARS}
        d["unet"] = asdict(self.unet)
        d["train"] = asdict(self.train)
        d["kmeans"] = asdict(self.kmeans)
        return d


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    labeled_count: int
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    selected_ids: list[str] = field(default_factory=list)
    selected_indices: list[AmbiguityIndices] = field(default_factory=list)
    correlations: list[dict] = field(default_factory=list)
    # function -> tile id -> score, and function -> ids it would select
    scores: dict[str, dict[str, float]] = field(default_factory=dict)
    would_select: dict[str, list[str]] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "labeled_count": self.labeled_count,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": asdict(self.counts),
            "best_epoch": self.best_epoch,
            "epochs_trained": len(self.history),
            "selected_ids": self.selected_ids,
            "selected_indices": [asdict(i) for i in self.selected_indices],
            "correlations": self.correlations,
        }


@dataclass
class RunReport:
    run: int
    seed: int
    status: str = "ok"
    error: str | None = None
    iterations: list[IterationRecord] = field(default_factory=list)
    full_f1: float | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {"run": self.run, "seed": self.seed, "status": self.status, "error": self.error,
                "full_f1": self.full_f1, "iterations": [r.to_dict() for r in self.iterations]}


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    runs: list[RunReport]
    pool_indices: list[AmbiguityIndices]
    config_input: dict | None = None

    def summary(self) -> dict:
        return aggregate_runs(self.runs)

    def to_dict(self) -> dict:
        try:
            summary = self.summary()
        except ValueError as exc:
            summary = {"error": str(exc)}
        return {
            "format": "floodal-report/1",
            "environment": environment_stamp(),
            "config_input": self.config_input,
            "config": self.config.to_dict(),
            "pool_indices": [asdict(i) for i in self.pool_indices],
            "runs": [r.to_dict() for r in self.runs],
            "summary": summary,
        }


def environment_stamp() -> dict:
    return {"package": "floodal", "version": __version__, "numpy": np.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


def _evaluate(network, corpus: Corpus, ids: list[str], T: int, seed: int,
              threshold: float) -> ConfusionCounts:
    tiles = [corpus[i][0] for i in ids]
    preds = mc_predict_many(network, tiles, T, seed)
    counts = ConfusionCounts()
    for pred, tid in zip(preds, ids):
        counts = counts + confusion(predict_binary(pred, threshold), corpus[tid][1])
    return counts


def corpus_indices(corpus: Corpus) -> dict[str, AmbiguityIndices]:
    return {t.id: compute_indices(t, m) for t, m in corpus}


def _correlations(scores: dict[str, dict[str, float]], ids: list[str],
                  idx: dict[str, AmbiguityIndices]) -> list[dict]:
    out = []
    for fn in UNCERTAINTY_FUNCTIONS:
        raw = np.array([scores[fn][i] for i in ids])
        oriented = -raw if fn == "margin" else raw
        for index_name in ("bpr", "mdf"):
            vals = [getattr(idx[i], index_name) for i in ids]
            keep = [v is not None for v in vals]
            x = np.array([v for v in vals if v is not None], dtype=np.float64)
            for orientation, y in (("uncertainty", oriented), ("raw", raw)):
                yk = y[keep]
                if len(x) < 3:
                    res_rho, res_p, n = None, None, len(x)
                else:
                    res = spearman(x, yk)
                    res_rho, res_p, n = res.rho, res.p_value, res.n
                out.append({"function": fn, "index": index_name, "orientation": orientation,
                            "rho": res_rho, "p_value": res_p, "n": n})
    return out


def _score_pool(config: ExperimentConfig, network, pool_corpus: Corpus, pool: PoolState,
                run: int, iteration: int):
    """Scores and would-be selections of all five functions on the unlabeled pool."""
    ids = pool.unlabeled_ids
    tiles = [pool_corpus[i][0] for i in ids]
    k = min(config.k_per_iteration, len(ids))
    preds = mc_predict_many(network, tiles, config.T, derive_seed(config.seed, run, iteration, "mc"))
    scores: dict[str, dict[str, float]] = {}
    would: dict[str, list[str]] = {}
    for fn, score_fn in SCORE_FUNCTIONS.items():
        recs = []
        for pred, tid in zip(preds, ids):
            valid = pool_corpus[tid][1].valid if config.exclude_nodata_in_scores else None
            recs.append(score_fn(pred, valid))
        scores[fn] = {r.tile_id: r.score for r in recs}
        would[fn] = select_top(recs, k)
    prio = random_priorities(ids, derive_seed(config.seed, run, iteration, "random"))
    scores["random"] = prio
    would["random"] = sorted(ids, key=lambda i: (prio[i], i))[:k]
    km = KMeansConfig(config.kmeans.n_components, k, config.kmeans.max_iters,
                      derive_seed(config.seed, run, iteration, "kmeans"))
    picks, dists = kmeans_select(tiles, km, return_details=True)
    scores["kmeans"] = dists
    would["kmeans"] = picks
    return scores, would


def run_single(config: ExperimentConfig, pool_corpus: Corpus, target_corpus: Corpus, run: int,
               progress: Callable[[str], None] | None = None,
               pool_idx: dict[str, AmbiguityIndices] | None = None) -> RunReport:
    say = progress or (lambda msg: None)
    run_seed = derive_seed(config.seed, run)
    report = RunReport(run, run_seed)
    idx = pool_idx if pool_idx is not None else corpus_indices(pool_corpus)
    pool = build_pool(pool_corpus, target_corpus, config.n_initial, derive_seed(config.seed, run, "pool"))
    validation = [target_corpus[i] for i in pool.validation_ids]
    try:
        for it in range(config.n_iterations + 1):
            t0 = time.perf_counter()
            labeled = [pool_corpus[i] for i in pool.labeled_ids]
            net = build_unet(config.unet, derive_seed(config.seed, run, it, "init"))
            tcfg = TrainConfig(**{**asdict(config.train), "seed": derive_seed(config.seed, run, it, "train")})
            net, hist = train(net, labeled, validation, tcfg)
            counts = _evaluate(net, target_corpus, pool.test_ids, config.T,
                               derive_seed(config.seed, run, it, "test"), config.threshold)
            prec, rec, f1v = f1(counts)
            record = IterationRecord(it, len(pool.labeled_ids), prec, rec, f1v, counts,
                                     history=[asdict(e) for e in hist.epochs], best_epoch=hist.best_epoch)
            if pool.unlabeled_ids:
                scores, would = _score_pool(config, net, pool_corpus, pool, run, it)
                record.scores, record.would_select = scores, would
                record.correlations = _correlations(scores, pool.unlabeled_ids, idx)
                if it < config.n_iterations:
                    chosen = would[config.acquisition]
                    record.selected_ids = list(chosen)
                    record.selected_indices = [idx[i] for i in chosen]
                    pool.acquire(chosen)
            record.wall_time = time.perf_counter() - t0
            report.iterations.append(record)
            say(f"run {run} iteration {it}: labeled={record.labeled_count} f1={f1v:.4f} "
                f"epochs={len(hist.epochs)} ({record.wall_time:.1f}s)")
    except TrainingDiverged as exc:
        report.status = "failed"
        report.error = str(exc)
        say(f"run {run} failed: {exc}")
    return report


def _run_job(args):
    config, pool_corpus, target_corpus, run, pool_idx = args
    return run_single(config, pool_corpus, target_corpus, run, None, pool_idx)


def run_experiment(config: ExperimentConfig, pool_corpus: Corpus, target_corpus: Corpus,
                   jobs: int = 1, progress: Callable[[str], None] | None = None,
                   config_input: dict | None = None) -> ExperimentReport:
    errors = config.validate(len(pool_corpus))
    if errors:
        raise ConfigError(errors)
    idx = corpus_indices(pool_corpus)
    if jobs > 1 and config.n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            runs = list(ex.map(_run_job, [(config, pool_corpus, target_corpus, r, idx)
                                          for r in range(config.n_runs)]))
    else:
        runs = [run_single(config, pool_corpus, target_corpus, r, progress, idx)
                for r in range(config.n_runs)]
    if config.full_baseline:
        for run, f in zip(runs, full_data_baseline(config, pool_corpus, target_corpus)):
            run.full_f1 = f
    pool_indices = [idx[i] for i in pool_corpus.ids()]
    return ExperimentReport(config, runs, pool_indices, config_input)


def full_data_baseline(config: ExperimentConfig, pool_corpus: Corpus, target_corpus: Corpus) -> list[float]:
    """Per-run test F1 of a network trained on every pool tile.

    Run ``r`` uses the same split and the same initialization, shuffling and
    MC streams as iteration 0 of run ``r``, so a pool that is already fully
    labeled reproduces that iteration exactly.
    """
    out = []
    for run in range(config.n_runs):
        pool = build_pool(pool_corpus, target_corpus, config.n_initial, derive_seed(config.seed, run, "pool"))
        validation = [target_corpus[i] for i in pool.validation_ids]
        net = build_unet(config.unet, derive_seed(config.seed, run, 0, "init"))
        tcfg = TrainConfig(**{**asdict(config.train), "seed": derive_seed(config.seed, run, 0, "train")})
        net, _ = train(net, [pool_corpus[i] for i in pool_corpus.ids()], validation, tcfg)
        counts = _evaluate(net, target_corpus, pool.test_ids, config.T,
                           derive_seed(config.seed, run, 0, "test"), config.threshold)
        out.append(f1(counts)[2])
    return out


def aggregate_runs(reports: list[RunReport]) -> dict:
    """Per-iteration mF1/sdF1 over successful runs plus pooled selected-tile indices."""
    ok = [r for r in reports if r.ok]
    if not ok:
        raise ValueError("all runs failed")
    n_iter = min(len(r.iterations) for r in ok)
    per_iter = []
    for it in range(n_iter):
        recs = [r.iterations[it] for r in ok]
        mf1, sdf1 = aggregate_f1([x.f1 for x in recs])
        per_iter.append({
            "iteration": it,
            "labeled_count": recs[0].labeled_count,
            "mf1": mf1,
            "sdf1": sdf1,
            "n_runs": len(recs),
            "selected_indices": [asdict(i) for x in recs for i in x.selected_indices],
        })
    fulls = [r.full_f1 for r in ok if r.full_f1 is not None]
    full = None
    if fulls:
        m, s = aggregate_f1(fulls)
        full = {"mf1": m, "sdf1": s}
    return {"iterations": per_iter, "failed_runs": [r.run for r in reports if not r.ok],
            "full": full}


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

REPORT_CSVS = ("metrics.csv", "scores.csv", "indices.csv", "selections.csv", "history.csv")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: ExperimentReport, out_dir: str | Path) -> Path:
    """Write report.json plus the five CSV tables; wall times go to timings.log only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    idx = {i.tile_id: i for i in report.pool_indices}

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "labeled_count", "status", "precision", "recall", "f1",
                    "tp", "fp", "fn", "tn"])
        for r in report.runs:
            for it in r.iterations:
                c = it.counts
                w.writerow([r.run, it.iteration, it.labeled_count, r.status, _fmt(it.precision),
                            _fmt(it.recall), _fmt(it.f1), c.tp, c.fp, c.fn, c.tn])

    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "tile_id", "function", "score", "selected_flag", "acquired_flag"])
        for r in report.runs:
            for it in r.iterations:
                acquired = set(it.selected_ids)
                for fn in ACQUISITION_FUNCTIONS:
                    chosen = set(it.would_select.get(fn, []))
                    for tid, s in sorted(it.scores.get(fn, {}).items()):
                        w.writerow([r.run, it.iteration, tid, fn, _fmt(s), int(tid in chosen),
                                    int(fn == report.config.acquisition and tid in acquired)])

    with open(out / "indices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile_id", "bpr", "mdf", "fpr", "bps", "fps", "tps"])
        for tid in sorted(idx):
            w.writerow(idx[tid].row())

    with open(out / "selections.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "function", "tile_id", "bpr", "mdf", "fpr"])
        for r in report.runs:
            for it in r.iterations:
                for tid in it.selected_ids:
                    i = idx[tid]
                    w.writerow([r.run, it.iteration, report.config.acquisition, tid,
                                _fmt(i.bpr), _fmt(i.mdf), _fmt(i.fpr)])

    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "epoch", "train_loss", "val_loss", "stopped_flag"])
        for r in report.runs:
            for it in r.iterations:
                for e in it.history:
                    w.writerow([r.run, it.iteration, e["epoch"], _fmt(e["train_loss"]),
                                _fmt(e["val_loss"]), int(e["stopped"])])

    with open(out / "timings.log", "w") as fh:
        for r in report.runs:
            for it in r.iterations:
                fh.write(f"run={r.run} iteration={it.iteration} wall_time={it.wall_time:.3f}\n")
    return out / "report.json"
