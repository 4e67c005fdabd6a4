"""Corpus generation from a JSON region spec.

A spec looks like::

    {"seed": 0, "size": 64,
     "regions": [{"name": "pool", "count": 200,
                  "scene": {"spectral_separation": {"uniform": [0.5, 5.0]},
                            "flood_fraction_target": {"sweep": [0.05, 0.8]},
                            "noise_sigma": 0.02}}]}

A region may list ``"components": [{"count": n, "scene": {...}}, ...]``
instead of one ``scene``; tiles are numbered across components in order and
``count`` (optional) must equal their sum.

Each scene field is a number, ``{"uniform": [lo, hi]}``,
``{"loguniform": [lo, hi]}``, ``{"sweep": [lo, hi]}`` (evenly spaced over the
region's tiles) or ``{"choice": [v, ...]}``.  Tile ``i`` of region ``r`` gets
id ``r/0000i#0`` and a seed derived from the top-level ``seed``, ``r`` and ``i``.
"""

from __future__ import annotations

import math
from dataclasses import fields
from pathlib import Path

from .data import Corpus, SceneConfig, generate_synthetic_scene, save_corpus
from .indices import compute_indices
from .seeding import derive_seed, rng_for

SCENE_FIELDS = tuple(f.name for f in fields(SceneConfig) if f.name != "size")
DISTRIBUTIONS = ("uniform", "loguniform", "sweep", "choice")


class SpecError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid data spec:\n  " + "\n  ".join(self.errors))


def validate_spec(spec) -> list[str]:
    errors = []
    if not isinstance(spec, dict):
        return ["top level: expected an object"]
    for key in spec:
        if key not in ("seed", "size", "regions"):
            errors.append(f"{key}: unknown key")
    if not isinstance(spec.get("seed", 0), int):
        errors.append("seed: expected an integer")
    size = spec.get("size", 64)
    if not isinstance(size, int) or size < 2:
        errors.append("size: expected an integer >= 2")
    regions = spec.get("regions")
    if not isinstance(regions, list) or not regions:
        errors.append("regions: expected a non-empty list")
        return errors
    names = set()
    for n, region in enumerate(regions):
        where = f"regions[{n}]"
        if not isinstance(region, dict):
            errors.append(f"{where}: expected an object")
            continue
        name = region.get("name")
        if not isinstance(name, str) or not name or "/" in name:
            errors.append(f"{where}.name: expected a non-empty string without '/'")
        elif name in names:
            errors.append(f"{where}.name: duplicate region {name!r}")
        names.add(name)
        for key in region:
            if key not in ("name", "count", "scene", "components"):
                errors.append(f"{where}.{key}: unknown key")
        count = region.get("count")
        if "components" in region:
            if "scene" in region:
                errors.append(f"{where}: give either scene or components, not both")
            comps = region["components"]
            if not isinstance(comps, list) or not comps:
                errors.append(f"{where}.components: expected a non-empty list")
                continue
            total = 0
            for m, comp in enumerate(comps):
                cw = f"{where}.components[{m}]"
                if not isinstance(comp, dict):
                    errors.append(f"{cw}: expected an object")
                    continue
                for key in comp:
                    if key not in ("count", "scene"):
                        errors.append(f"{cw}.{key}: unknown key")
                errors.extend(_check_count(comp.get("count"), cw))
                if isinstance(comp.get("count"), int):
                    total += comp["count"]
                errors.extend(_check_scene(comp.get("scene", {}), cw))
            if count is not None and count != total:
                errors.append(f"{where}.count: {count} differs from the component total {total}")
        else:
            errors.extend(_check_count(count, where))
            errors.extend(_check_scene(region.get("scene", {}), where))
    return errors


def _check_count(count, where: str) -> list[str]:
    if not isinstance(count, int) or isinstance(count, bool) or count < 1:
        return [f"{where}.count: expected an integer >= 1"]
    return []


def _check_scene(scene, where: str) -> list[str]:
    if not isinstance(scene, dict):
        return [f"{where}.scene: expected an object"]
    errors = []
    for key, value in scene.items():
        if key not in SCENE_FIELDS:
            errors.append(f"{where}.scene.{key}: unknown scene field")
        else:
            errors.extend(f"{where}.scene.{key}: {e}" for e in _check_value(value))
    return errors


def _check_value(value) -> list[str]:
    if isinstance(value, bool):
        return ["expected a number or distribution"]
    if isinstance(value, (int, float)):
        return []
    if not isinstance(value, dict) or len(value) != 1:
        return [f"expected a number or one of {', '.join(DISTRIBUTIONS)}"]
    (kind, args), = value.items()
    if kind not in DISTRIBUTIONS:
        return [f"unknown distribution {kind!r}"]
    if not isinstance(args, list) or not args or not all(
            isinstance(a, (int, float)) and not isinstance(a, bool) for a in args):
        return [f"{kind}: expected a list of numbers"]
    if kind != "choice" and len(args) != 2:
        return [f"{kind}: expected [lo, hi]"]
    if kind == "loguniform" and min(args) <= 0:
        return ["loguniform: bounds must be > 0"]
    return []


def _draw(value, rng, index: int, count: int) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    (kind, args), = value.items()
    if kind == "uniform":
        return float(rng.uniform(args[0], args[1]))
    if kind == "loguniform":
        return float(math.exp(rng.uniform(math.log(args[0]), math.log(args[1]))))
    if kind == "sweep":
        frac = index / (count - 1) if count > 1 else 0.5
        return float(args[0] + (args[1] - args[0]) * frac)
    return float(args[int(rng.integers(len(args)))])


def scene_configs(spec: dict) -> dict[str, list[tuple[str, SceneConfig, int]]]:
    """Region name -> list of (tile id, scene config, scene seed)."""
    errors = validate_spec(spec)
    if errors:
        raise SpecError(errors)
    seed = spec.get("seed", 0)
    size = spec.get("size", 64)
    out = {}
    for region in spec["regions"]:
        name = region["name"]
        comps = region.get("components") or [{"count": region["count"], "scene": region.get("scene", {})}]
        plan = [(comp.get("scene", {}), j, comp["count"]) for comp in comps for j in range(comp["count"])]
        items = []
        for i, (scene, j, count) in enumerate(plan):
            rng = rng_for(seed, name, i, "params")
            # draw in a fixed field order so adding a constant field never shifts the others
            values = {k: _draw(scene[k], rng, j, count) for k in SCENE_FIELDS if k in scene}
            cfg = SceneConfig(size=size, **values)
            problems = cfg.validate()
            if problems:
                raise SpecError([f"{name} tile {i}: {p}" for p in problems])
            items.append((f"{name}/{i:05d}#0", cfg, derive_seed(seed, name, i, "scene")))
        out[name] = items
    return out


def generate_corpora(spec: dict) -> dict[str, Corpus]:
    corpora = {}
    for name, items in scene_configs(spec).items():
        corpora[name] = Corpus(generate_synthetic_scene(cfg, s, tid, name) for tid, cfg, s in items)
    return corpora


def write_corpora(spec: dict, out_dir: str | Path) -> dict[str, Path]:
    """Generate every region and save it as ``out_dir/<region>/`` with a manifest.

    Manifest entries carry the scene parameters and the tile's FPR, BPR and MDF.
    """
    out_dir = Path(out_dir)
    manifests = {}
    for name, items in scene_configs(spec).items():
        corpus = Corpus()
        extra = {}
        for tid, cfg, s in items:
            tile, mask = generate_synthetic_scene(cfg, s, tid, name)
            corpus.add(tile, mask)
            ind = compute_indices(tile, mask)
            extra[tid] = {"scene": {k: getattr(cfg, k) for k in SCENE_FIELDS}, "seed": s,
                          "fpr": ind.fpr, "bpr": ind.bpr, "mdf": ind.mdf}
        manifests[name] = save_corpus(corpus, out_dir / name, extra)
    return manifests
