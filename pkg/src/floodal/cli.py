"""Command-line front end.

    floodal gen-data --config data.json --out corpora/
    floodal run --config exp.json --pool corpora/pool --target corpora/target --out runs/margin
    floodal analyze runs/margin/report.json runs/random/report.json --out analysis/
    floodal plot --kind f1_curve --inputs runs/*/report.json --out f1.svg
    floodal baseline --config exp.json --pool corpora/pool --target corpora/target --out runs/full

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
The default output directory comes from $FLOODAL_OUT (falling back to
./floodal-out) whenever --out is omitted.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import TileFormatError, load_corpus
from .orchestrator import (
    ACQUISITION_FUNCTIONS,
    UNCERTAINTY_FUNCTIONS,
    ConfigError,
    ExperimentConfig,
    full_data_baseline,
    run_experiment,
    write_report,
)
from .plotting import correlation_box_svg, curve_svg, density_svg
from .stats import DEFAULT_LEVELS, aggregate_f1, split_pearson
from .synth import SpecError, write_corpora

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
OUT_ENV = "FLOODAL_OUT"
PLOT_KINDS = ("mdf_bpr_density", "fpr_bpr_density", "f1_curve", "sd_curve", "correlation_box")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "floodal-out")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _read_json(path: str | Path, what: str, code: int = EXIT_CONFIG):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}", code)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {p} is not valid JSON: {exc}", code) from exc


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_DATA) from exc


def _load_corpus(path: str, role: str):
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{role} corpus not found: {p}", EXIT_DATA)
    try:
        return load_corpus(p)
    except (FileNotFoundError, TileFormatError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load {role} corpus {p}: {exc}", EXIT_DATA) from exc


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = _read_json(args.config, "data config")
    if args.seed is not None:
        spec["seed"] = args.seed
    out = Path(args.out or _default_out())
    try:
        manifests = write_corpora(spec, out)
    except SpecError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(f"cannot write corpus under {out}: {exc}", EXIT_DATA) from exc
    for name, m in manifests.items():
        n = len(json.loads(m.read_text())["tiles"])
        _log(f"region {name}: {n} tiles -> {m}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run / baseline
# ---------------------------------------------------------------------------

_FLAG_KEYS = {
    "acquisition": "acquisition", "n_initial": "n_initial", "k": "k_per_iteration",
    "n_iterations": "n_iterations", "n_runs": "n_runs", "T": "T", "seed": "seed",
}


def _resolve_config(args) -> tuple[ExperimentConfig, dict | None]:
    raw = _read_json(args.config, "experiment config") if args.config else {}
    if not isinstance(raw, dict):
        raise CliError("experiment config: expected a JSON object", EXIT_CONFIG)
    merged = json.loads(json.dumps(raw))
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    if getattr(args, "full_baseline", False):
        merged["full_baseline"] = True
    try:
        return ExperimentConfig.from_dict(merged), (raw if args.config else None)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def cmd_run(args) -> int:
    config, raw = _resolve_config(args)
    pool = _load_corpus(args.pool, "pool")
    target = _load_corpus(args.target, "target")
    errors = config.validate(len(pool))
    if len(target) < 2:
        errors.append(f"target corpus needs at least 2 tiles, has {len(target)}")
    if errors:
        raise CliError(str(ConfigError(errors)), EXIT_CONFIG)
    out = Path(args.out or _default_out())
    if args.dry_run:
        plan = {"config": config.to_dict(), "pool": str(args.pool), "pool_size": len(pool),
                "target": str(args.target), "target_size": len(target), "out": str(out),
                "labeled_counts": [config.n_initial + i * config.k_per_iteration
                                   for i in range(config.n_iterations + 1)]}
        print(json.dumps(plan, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        report = run_experiment(config, pool, target, jobs=args.jobs, progress=_log, config_input=raw)
    except (ValueError, RuntimeError, MemoryError) as exc:
        raise CliError(f"experiment failed: {exc}", EXIT_RUNTIME) from exc
    try:
        path = write_report(report, out)
    except OSError as exc:
        raise CliError(f"cannot write report under {out}: {exc}", EXIT_DATA) from exc
    failed = [r.run for r in report.runs if not r.ok]
    _log(f"wrote {path}" + (f" ({len(failed)} failed run(s): {failed})" if failed else ""))
    if len(failed) == len(report.runs):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_baseline(args) -> int:
    config, raw = _resolve_config(args)
    pool = _load_corpus(args.pool, "pool")
    target = _load_corpus(args.target, "target")
    errors = config.validate()
    if errors:
        raise CliError(str(ConfigError(errors)), EXIT_CONFIG)
    try:
        scores = full_data_baseline(config, pool, target)
    except (ValueError, RuntimeError) as exc:
        raise CliError(f"baseline failed: {exc}", EXIT_RUNTIME) from exc
    mf1, sdf1 = aggregate_f1(scores)
    doc = {"format": "floodal-baseline/1", "config": config.to_dict(), "config_input": raw,
           "f1_per_run": scores, "mf1": mf1, "sdf1": sdf1}
    out = Path(args.out or _default_out())
    _write_text(out / "baseline.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _log(f"full-data mF1 = {mf1:.4f} (sd {sdf1:.4f}) over {len(scores)} run(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def load_report(path: str | Path) -> dict:
    doc = _read_json(path, "report", EXIT_DATA)
    if not isinstance(doc, dict) or doc.get("format") != "floodal-report/1":
        raise CliError(f"malformed report {path}: missing floodal-report/1 format tag", EXIT_DATA)
    for key in ("config", "runs", "pool_indices", "summary"):
        if key not in doc:
            raise CliError(f"malformed report {path}: missing {key!r}", EXIT_DATA)
    return doc


def spearman_rows(doc: dict) -> list[dict]:
    """One row per (run, iteration, uncertainty function) with BPR and MDF correlations."""
    arm = doc["config"]["acquisition"]
    rows = []
    for run in doc["runs"]:
        for it in run["iterations"]:
            table = {(c["function"], c["index"], c["orientation"]): c for c in it["correlations"]}
            for fn in UNCERTAINTY_FUNCTIONS:
                if (fn, "bpr", "uncertainty") not in table:
                    continue
                row = {"arm": arm, "run": run["run"], "iteration": it["iteration"], "function": fn}
                for index in ("bpr", "mdf"):
                    c = table[(fn, index, "uncertainty")]
                    row[f"rho_{index}"] = c["rho"]
                    row[f"p_{index}"] = c["p_value"]
                    row[f"n_{index}"] = c["n"]
                    row[f"rho_{index}_raw"] = table[(fn, index, "raw")]["rho"]
                rows.append(row)
    return rows


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summary_rows(doc: dict) -> list[dict]:
    arm = doc["config"]["acquisition"]
    rows = []
    for it in doc["summary"].get("iterations", []):
        sel = it["selected_indices"]
        rows.append({"arm": arm, "iteration": it["iteration"], "labeled_count": it["labeled_count"],
                     "mf1": it["mf1"], "sdf1": it["sdf1"], "n_runs": it["n_runs"],
                     "n_selected": len(sel),
                     "mean_selected_bpr": _mean(s["bpr"] for s in sel),
                     "mean_selected_mdf": _mean(s["mdf"] for s in sel),
                     "mean_selected_fpr": _mean(s["fpr"] for s in sel)})
    return rows


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in columns])


def _corpus_indices_from_manifest(directory: str) -> tuple[list[float], list[float]]:
    doc = _read_json(Path(directory) / "manifest.json", "corpus manifest", EXIT_DATA)
    try:
        pairs = [(float(e["fpr"]), float(e["bpr"])) for e in doc["tiles"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"manifest in {directory} lacks fpr/bpr columns", EXIT_DATA) from exc
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _fmt(v, spec=".4f") -> str:
    return "n/a" if v is None else format(v, spec)


def cmd_analyze(args) -> int:
    if not args.reports and not args.corpus:
        raise CliError("analyze: give at least one report.json (or --corpus DIR)\n"
                       "usage: floodal analyze REPORT [REPORT ...] [--corpus DIR] [--out DIR]", EXIT_CONFIG)
    out = Path(args.out or _default_out())
    docs = [(p, load_report(p)) for p in args.reports]
    sp_rows, sum_rows, split_rows = [], [], []
    for path, doc in docs:
        sp_rows += [{"report": str(path), **r} for r in spearman_rows(doc)]
        sum_rows += [{"report": str(path), **r} for r in summary_rows(doc)]
        pi = doc["pool_indices"]
        s = split_pearson([r["fpr"] for r in pi], [r["bpr"] for r in pi], args.threshold)
        split_rows.append({"source": str(path), "n_below": s.n_below, "r_below": s.r_below,
                           "n_at_or_above": s.n_at_or_above, "r_at_or_above": s.r_at_or_above,
                           "threshold": s.threshold})
    for directory in args.corpus or []:
        fpr, bpr = _corpus_indices_from_manifest(directory)
        s = split_pearson(fpr, bpr, args.threshold)
        split_rows.append({"source": str(directory), "n_below": s.n_below, "r_below": s.r_below,
                           "n_at_or_above": s.n_at_or_above, "r_at_or_above": s.r_at_or_above,
                           "threshold": s.threshold})

    sp_cols = ["report", "arm", "run", "iteration", "function", "rho_bpr", "p_bpr", "n_bpr",
               "rho_mdf", "p_mdf", "n_mdf", "rho_bpr_raw", "rho_mdf_raw"]
    sum_cols = ["report", "arm", "iteration", "labeled_count", "mf1", "sdf1", "n_runs", "n_selected",
                "mean_selected_bpr", "mean_selected_mdf", "mean_selected_fpr"]
    split_cols = ["source", "n_below", "r_below", "n_at_or_above", "r_at_or_above", "threshold"]
    _write_csv(out / "spearman.csv", sp_rows, sp_cols)
    _write_csv(out / "summary.csv", sum_rows, sum_cols)
    _write_csv(out / "split_pearson.csv", split_rows, split_cols)

    lines = []
    if sp_rows:
        lines.append("Spearman correlation of tile indices with uncertainty-oriented scores")
        lines.append(f"{'arm':<8} {'run':>3} {'iter':>4} {'function':<8} {'rho(BPR)':>9} {'p':>8} "
                     f"{'rho(MDF)':>9} {'p':>8}")
        for r in sp_rows:
            lines.append(f"{r['arm']:<8} {r['run']:>3} {r['iteration']:>4} {r['function']:<8} "
                         f"{_fmt(r['rho_bpr'], '9.4f'):>9} {_fmt(r['p_bpr'], '8.2g'):>8} "
                         f"{_fmt(r['rho_mdf'], '9.4f'):>9} {_fmt(r['p_mdf'], '8.2g'):>8}")
        lines.append("")
    if sum_rows:
        lines.append("Per-iteration F1 and selected-tile indices")
        lines.append(f"{'arm':<8} {'iter':>4} {'labeled':>7} {'mF1':>7} {'sdF1':>7} {'BPR':>7} {'MDF':>7} {'FPR':>7}")
        for r in sum_rows:
            lines.append(f"{r['arm']:<8} {r['iteration']:>4} {r['labeled_count']:>7} {_fmt(r['mf1']):>7} "
                         f"{_fmt(r['sdf1']):>7} {_fmt(r['mean_selected_bpr']):>7} "
                         f"{_fmt(r['mean_selected_mdf']):>7} {_fmt(r['mean_selected_fpr']):>7}")
        lines.append("")
    lines.append(f"Split Pearson(FPR, BPR) at FPR threshold {args.threshold}")
    for r in split_rows:
        lines.append(f"{r['source']}: below r={_fmt(r['r_below'])} (n={r['n_below']}), "
                     f"at/above r={_fmt(r['r_at_or_above'])} (n={r['n_at_or_above']})")
    text = "\n".join(lines) + "\n"
    _write_text(out / "analysis.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

_DENSITY_AXES = {"mdf_bpr_density": ("mdf", "bpr"), "fpr_bpr_density": ("fpr", "bpr")}
_AXIS_LABELS = {"mdf": "MDF", "bpr": "BPR", "fpr": "FPR"}


def plot_spec_from_args(args) -> dict:
    spec = _read_json(args.spec, "plot spec") if args.spec else {}
    for key in ("kind", "inputs", "out", "xlabel", "ylabel", "levels", "iteration", "subset",
                "title", "baseline"):
        value = getattr(args, key, None)
        if value is not None:
            spec[key] = value
    return spec


def validate_plot_spec(spec: dict) -> list[str]:
    errors = []
    known = {"kind", "inputs", "out", "xlabel", "ylabel", "levels", "iteration", "subset", "title", "baseline"}
    errors += [f"{k}: unknown key" for k in spec if k not in known]
    if spec.get("kind") not in PLOT_KINDS:
        errors.append(f"kind: must be one of {', '.join(PLOT_KINDS)}")
    inputs = spec.get("inputs")
    if not isinstance(inputs, list) or not inputs:
        errors.append("inputs: expected a non-empty list of report paths")
    if not spec.get("out"):
        errors.append("out: output path required")
    allowed = {round(l, 2) for l in DEFAULT_LEVELS}
    levels = spec.get("levels", list(DEFAULT_LEVELS))
    if not isinstance(levels, list) or not levels or any(
            not isinstance(l, (int, float)) or round(float(l), 2) not in allowed
            or abs(float(l) - round(float(l), 2)) > 1e-9 for l in levels):
        errors.append("levels: each level must be one of 0.05, 0.10, ..., 0.95")
    if spec.get("subset", "selected") not in ("selected", "pool"):
        errors.append("subset: must be 'selected' or 'pool'")
    if "iteration" in spec and (not isinstance(spec["iteration"], int) or spec["iteration"] < 0):
        errors.append("iteration: expected an integer >= 0")
    return errors


def _density_points(docs: list[dict], x_key: str, y_key: str, subset: str, iteration: int):
    rows = []
    for doc in docs:
        if subset == "pool":
            rows += doc["pool_indices"]
        else:
            its = doc["summary"].get("iterations", [])
            if iteration < len(its):
                rows += its[iteration]["selected_indices"]
    pts = [(r[x_key], r[y_key]) for r in rows if r.get(x_key) is not None and r.get(y_key) is not None]
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def render_plot(spec: dict) -> str:
    """Render a validated plot spec to SVG markup."""
    for p in spec["inputs"]:
        if not Path(p).is_file():
            raise CliError(f"plot input not found: {p}", EXIT_DATA)
    docs = [load_report(p) for p in spec["inputs"]]
    kind = spec["kind"]
    title = spec.get("title", "")
    if kind in _DENSITY_AXES:
        xk, yk = _DENSITY_AXES[kind]
        subset = spec.get("subset", "selected")
        iteration = spec.get("iteration", 1 if subset == "selected" else 0)
        pts = _density_points(docs, xk, yk, subset, iteration)
        if not title:
            arms = sorted({d["config"]["acquisition"] for d in docs})
            title = f"{'/'.join(arms)} {subset} tiles" + (f", iteration {iteration}" if subset == "selected" else "")
        return density_svg(pts, spec.get("xlabel", _AXIS_LABELS[xk]), spec.get("ylabel", _AXIS_LABELS[yk]),
                           title, spec.get("levels", list(DEFAULT_LEVELS)))
    if kind in ("f1_curve", "sd_curve"):
        key = "mf1" if kind == "f1_curve" else "sdf1"
        series = {}
        starts, fulls = [], []
        for doc in docs:
            its = doc["summary"].get("iterations", [])
            name = doc["config"]["acquisition"]
            if name in series:
                name = f"{name} ({len(series)})"
            series[name] = [(float(i["labeled_count"]), float(i[key])) for i in its]
            if its:
                starts.append(its[0][key])
            full = doc["summary"].get("full")
            if full:
                fulls.append(full[key])
        full_line = None
        if spec.get("baseline"):
            b = _read_json(spec["baseline"], "baseline", EXIT_DATA)
            full_line = b.get(key)
        elif fulls:
            full_line = float(np.mean(fulls))
        start_line = float(np.mean(starts)) if starts and kind == "f1_curve" else None
        ylabel = spec.get("ylabel", "mean F1" if kind == "f1_curve" else "sd of F1")
        return curve_svg(series, ylabel, title or ("mF1 per labeled-set size" if kind == "f1_curve"
                                                   else "sdF1 per labeled-set size"),
                         spec.get("xlabel", "labeled tiles"), start_line, full_line)
    iteration = spec.get("iteration", 1)
    groups: dict[str, list[float]] = {}
    for doc in docs:
        arm = doc["config"]["acquisition"]
        for r in spearman_rows(doc):
            if r["iteration"] != iteration:
                continue
            for index in ("bpr", "mdf"):
                groups.setdefault(f"{r['function']}:{index.upper()}", []).append(r[f"rho_{index}"])
        title = title or f"Spearman rho at iteration {iteration} ({arm} arm)"
    return correlation_box_svg(dict(sorted(groups.items())), title)


def cmd_plot(args) -> int:
    spec = plot_spec_from_args(args)
    errors = validate_plot_spec(spec)
    if errors:
        raise CliError(str(ConfigError(errors)), EXIT_CONFIG)
    svg = render_plot(spec)
    out = Path(spec["out"])
    _write_text(out, svg)
    if 'class="warning"' in svg:
        _log(f"wrote {out} with a warning annotation")
    else:
        _log(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON; flags below override its keys")
    p.add_argument("--pool", required=True, help="pool corpus directory (with manifest.json)")
    p.add_argument("--target", required=True, help="target corpus directory (split into validation/test)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./floodal-out)")
    p.add_argument("--acquisition", choices=ACQUISITION_FUNCTIONS)
    p.add_argument("--n-initial", dest="n_initial", type=int)
    p.add_argument("--k", type=int, help="tiles acquired per iteration")
    p.add_argument("--n-iterations", dest="n_iterations", type=int)
    p.add_argument("--n-runs", dest="n_runs", type=int)
    p.add_argument("--T", type=int, help="MC-dropout passes")
    p.add_argument("--seed", type=int, help="base seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodal", description=__doc__.split("\n")[0] or None,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic corpora from a region spec")
    p.add_argument("--config", required=True, help="data spec JSON")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./floodal-out)")
    p.add_argument("--seed", type=int, help="override the seed in the data config")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run an active-learning experiment")
    _add_experiment_flags(p)
    p.add_argument("--jobs", type=int, default=1, help="runs executed in parallel processes")
    p.add_argument("--full-baseline", dest="full_baseline", action="store_true",
                   help="also train on the whole pool per run")
    p.add_argument("--dry-run", dest="dry_run", action="store_true",
                   help="validate and print the resolved plan without training")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("baseline", help="train on the whole pool and report test F1 per run")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("analyze", help="Spearman, split-Pearson and F1 summary tables")
    p.add_argument("reports", nargs="*", help="report.json files")
    p.add_argument("--corpus", action="append", help="corpus directory whose manifest feeds split Pearson")
    p.add_argument("--threshold", type=float, default=0.5, help="FPR split point")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./floodal-out)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plot", help="render an SVG figure")
    p.add_argument("--spec", help="plot spec JSON; flags override its keys")
    p.add_argument("--kind", choices=PLOT_KINDS)
    p.add_argument("--inputs", nargs="+", help="report.json files")
    p.add_argument("--out", help="output .svg path")
    p.add_argument("--xlabel")
    p.add_argument("--ylabel")
    p.add_argument("--title")
    p.add_argument("--levels", type=float, nargs="+", help="iso-proportion levels to draw")
    p.add_argument("--iteration", type=int, help="iteration for selected-tile densities and box plots")
    p.add_argument("--subset", choices=("selected", "pool"), help="density of selected tiles or of the pool")
    p.add_argument("--baseline", help="baseline.json supplying the full-data line")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _log(f"error: {exc}")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
