"""Tiles, label masks, preprocessing, the synthetic scene generator and pool bookkeeping."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

NONFLOOD = 0
FLOOD = 1
NODATA = 255
CLASS_CODES = (NONFLOOD, FLOOD, NODATA)

TILE_MAGIC = b"FTL1"
_HEADER = struct.Struct("<4sIII")


class TileFormatError(ValueError):
    pass


@dataclass
class Tile:
    id: str
    region: str
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise ValueError(f"tile {self.id}: pixels must be C x H x W, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError(f"tile {self.id}: non-finite pixel values")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError(f"tile {self.id}: pixel values outside [0, 1]")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class LabelMask:
    classes: np.ndarray  # (H, W) uint8 over {0, 1, 255}

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.ndim != 2:
            raise ValueError(f"label mask must be H x W, got shape {self.classes.shape}")
        bad = np.setdiff1d(np.unique(self.classes), CLASS_CODES)
        if bad.size:
            raise ValueError(f"unknown class codes {bad.tolist()}")

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.classes != NODATA

    @property
    def flood(self) -> np.ndarray:
        return self.classes == FLOOD


def _check_pair(tile: Tile, mask: LabelMask) -> None:
    if (tile.height, tile.width) != (mask.height, mask.width):
        raise ValueError(
            f"tile {tile.id} is {tile.height}x{tile.width} but its mask is {mask.height}x{mask.width}")


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Standard RGB->HSV on a (3, ...) array in [0, 1]; hue is returned in [0, 1)."""
    r, g, b = rgb[0], rgb[1], rgb[2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_preprocess(raw: np.ndarray, tile_id: str = "tile", region: str = "") -> Tile:
    """Turn a (red, NIR, SWIR2) reflectance stack into an HSV tile.

    Negative reflectances are clipped to zero, then every band is min-max
    scaled to [0, 1] over the tile (a constant band maps to 0) and the three
    bands are read as R, G, B.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W (red, NIR, SWIR2) array, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite reflectance values")
    x = np.clip(raw, 0.0, None)
    lo = x.min(axis=(1, 2), keepdims=True)
    span = x.max(axis=(1, 2), keepdims=True) - lo
    scaled = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1), 0.0)
    hsv = np.clip(rgb_to_hsv(scaled), 0.0, 1.0)
    return Tile(tile_id, region, hsv.astype(np.float32))


def quarter_tile(tile: Tile, mask: LabelMask) -> list[tuple[Tile, LabelMask]]:
    """Split into NW, NE, SW, SE quadrants; ids get ``#0``..``#3``."""
    _check_pair(tile, mask)
    h, w = tile.height, tile.width
    if h % 2 or w % 2:
        raise ValueError(f"quarter_tile needs even dimensions, got {h}x{w}")
    base = tile.id.split("#", 1)[0]
    hh, hw = h // 2, w // 2
    out = []
    for q, (r0, c0) in enumerate([(0, 0), (0, hw), (hh, 0), (hh, hw)]):
        px = tile.pixels[:, r0:r0 + hh, c0:c0 + hw].copy()
        mk = mask.classes[r0:r0 + hh, c0:c0 + hw].copy()
        out.append((Tile(f"{base}#{q}", tile.region, px), LabelMask(mk)))
    return out


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

# Nominal (red, NIR, SWIR2) surface reflectances.
LAND_SIGNATURE = np.array([0.08, 0.30, 0.18])
WATER_SIGNATURE = np.array([0.05, 0.03, 0.01])
TEXTURE_SIGMA = 0.02
MAX_OCTAVES = 5


@dataclass
class SceneConfig:
    size: int = 64
    spectral_separation: float = 3.0
    boundary_complexity: float = 0.5
    flood_fraction_target: float = 0.3
    noise_sigma: float = 0.02
    nodata_fraction: float = 0.0

    def validate(self) -> list[str]:
        errors = []
        if self.size < 2:
            errors.append("size must be >= 2")
        if not self.spectral_separation > 0:
            errors.append("spectral_separation must be > 0")
        for name in ("boundary_complexity", "flood_fraction_target", "nodata_fraction"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                errors.append(f"{name} must be in [0, 1]")
        if self.noise_sigma < 0:
            errors.append("noise_sigma must be >= 0")
        return errors

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field_ = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    std = field_.std()
    return field_ / std if std > 0 else field_


def fractal_field(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """Sum of band-limited noise octaves, each twice as fine and half as strong."""
    total = np.zeros((size, size))
    for o in range(octaves):
        total += 0.5 ** o * _smooth_noise(rng, size, max(size / (4 * 2 ** o), 0.5))
    return total


def generate_synthetic_scene(config: SceneConfig, seed: int, tile_id: str | None = None,
                             region: str = "synthetic") -> tuple[Tile, LabelMask]:
    """Deterministic flood scene: fractal terrain flooded up to a quantile water level.

    Class means are ``spectral_separation`` within-class standard deviations
    apart along the land->water direction; boundary pixels are spectrally
    mixed.  No-data pixels keep their generated values and are only flagged
    in the mask.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    rng = np.random.default_rng(seed)
    n = config.size
    octaves = 1 + int(round(config.boundary_complexity * (MAX_OCTAVES - 1)))
    elevation = fractal_field(rng, n, octaves)
    f = config.flood_fraction_target
    if f <= 0:
        flood = np.zeros((n, n), dtype=bool)
    elif f >= 1:
        flood = np.ones((n, n), dtype=bool)
    else:
        flood = elevation < np.quantile(elevation, f)

    within = np.hypot(TEXTURE_SIGMA, config.noise_sigma)
    direction = WATER_SIGNATURE - LAND_SIGNATURE
    direction = direction / np.linalg.norm(direction)
    offset = config.spectral_separation * within * direction
    mix = gaussian_filter(flood.astype(np.float64), 0.6, mode="nearest")
    texture = np.stack([_smooth_noise(rng, n, 1.5) for _ in range(3)]) * TEXTURE_SIGMA
    noise = rng.standard_normal((3, n, n)) * config.noise_sigma
    raw = LAND_SIGNATURE[:, None, None] + mix[None] * offset[:, None, None] + texture + noise

    classes = flood.astype(np.uint8)
    if config.nodata_fraction > 0:
        blob = _smooth_noise(rng, n, n / 8)
        classes[blob < np.quantile(blob, config.nodata_fraction)] = NODATA
    tid = tile_id if tile_id is not None else f"{region}/{seed}#0"
    tile = hsv_preprocess(raw, tid, region)
    return tile, LabelMask(classes)


# ---------------------------------------------------------------------------
# Tile container
#
# little-endian: b"FTL1" | u32 C | u32 H | u32 W | C*H*W float32 | H*W uint8
# ---------------------------------------------------------------------------


def save_tile(tile: Tile, mask: LabelMask, path: str | Path) -> None:
    _check_pair(tile, mask)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TILE_MAGIC, tile.channels, tile.height, tile.width))
        fh.write(np.ascontiguousarray(tile.pixels, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(mask.classes, dtype=np.uint8).tobytes())


def load_tile(path: str | Path, tile_id: str | None = None, region: str = "",
              expected_channels: int | None = None) -> tuple[Tile, LabelMask]:
    raw = Path(path).read_bytes()
    if raw[:4] != TILE_MAGIC:
        raise TileFormatError(f"{path}: bad magic")
    if len(raw) < _HEADER.size:
        raise TileFormatError(f"{path}: truncated payload")
    _, c, h, w = _HEADER.unpack_from(raw)
    if c == 0 or h == 0 or w == 0:
        raise TileFormatError(f"{path}: dimension mismatch (zero-sized header {c}x{h}x{w})")
    if expected_channels is not None and c != expected_channels:
        raise TileFormatError(f"{path}: channel mismatch (file has {c}, expected {expected_channels})")
    n_px = c * h * w * 4
    need = _HEADER.size + n_px + h * w
    if len(raw) < need:
        raise TileFormatError(f"{path}: truncated payload ({len(raw)} of {need} bytes)")
    if len(raw) > need:
        raise TileFormatError(f"{path}: dimension mismatch ({len(raw) - need} trailing bytes)")
    pixels = np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=_HEADER.size).reshape(c, h, w)
    classes = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=_HEADER.size + n_px).reshape(h, w)
    bad = np.setdiff1d(np.unique(classes), CLASS_CODES)
    if bad.size:
        raise TileFormatError(f"{path}: unknown class codes {bad.tolist()}")
    tid = tile_id if tile_id is not None else Path(path).stem
    return Tile(tid, region, pixels.astype(np.float32)), LabelMask(classes.copy())


def tile_filename(tile_id: str) -> str:
    return tile_id.replace("/", "__").replace("#", "_q") + ".ftl"


class Corpus:
    """Ordered id -> (Tile, LabelMask) collection; iteration is lexicographic by id."""

    def __init__(self, samples: Iterable[tuple[Tile, LabelMask]] = ()):
        self._items: dict[str, tuple[Tile, LabelMask]] = {}
        for tile, mask in samples:
            self.add(tile, mask)

    def add(self, tile: Tile, mask: LabelMask) -> None:
        _check_pair(tile, mask)
        if tile.id in self._items:
            raise ValueError(f"duplicate tile id {tile.id!r}")
        self._items[tile.id] = (tile, mask)

    def ids(self) -> list[str]:
        return sorted(self._items)

    def __getitem__(self, tile_id: str) -> tuple[Tile, LabelMask]:
        return self._items[tile_id]

    def __contains__(self, tile_id: str) -> bool:
        return tile_id in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[tuple[Tile, LabelMask]]:
        for k in self.ids():
            yield self._items[k]

    def subset(self, ids: Iterable[str]) -> "Corpus":
        return Corpus(self._items[i] for i in ids)


def save_corpus(corpus: Corpus, directory: str | Path, extra: dict[str, dict] | None = None) -> Path:
    """Write every tile plus ``manifest.json``; ``extra`` adds per-id manifest columns."""
    directory = Path(directory)
    (directory / "tiles").mkdir(parents=True, exist_ok=True)
    entries = []
    for tile, mask in corpus:
        rel = f"tiles/{tile_filename(tile.id)}"
        save_tile(tile, mask, directory / rel)
        entry = {"id": tile.id, "path": rel, "region": tile.region}
        if extra and tile.id in extra:
            entry.update(extra[tile.id])
        entries.append(entry)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"format": "FTL1", "tiles": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    doc = json.loads(manifest.read_text())
    corpus = Corpus()
    for e in doc["tiles"]:
        tile, mask = load_tile(directory / e["path"], e["id"], e.get("region", ""))
        corpus.add(tile, mask)
    return corpus


# ---------------------------------------------------------------------------
# Pool bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class PoolState:
    labeled_ids: list[str] = field(default_factory=list)
    unlabeled_ids: list[str] = field(default_factory=list)
    validation_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("labeled_ids", "unlabeled_ids", "validation_ids", "test_ids"):
            setattr(self, name, sorted(getattr(self, name)))
        self._check_disjoint()

    def _check_disjoint(self):
        seen: set[str] = set()
        for group in (self.labeled_ids, self.unlabeled_ids, self.validation_ids, self.test_ids):
            if len(set(group)) != len(group) or seen.intersection(group):
                raise ValueError("pool sets must be pairwise disjoint and duplicate-free")
            seen.update(group)

    def acquire(self, ids: Iterable[str]) -> None:
        """Move ``ids`` from unlabeled to labeled (oracle labeling)."""
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in acquisition")
        unl = set(self.unlabeled_ids)
        missing = [i for i in ids if i not in unl]
        if missing:
            raise ValueError(f"ids not in the unlabeled pool: {missing}")
        self.unlabeled_ids = sorted(unl.difference(ids))
        self.labeled_ids = sorted(set(self.labeled_ids).union(ids))

    def to_dict(self) -> dict:
        return {"labeled_ids": self.labeled_ids, "unlabeled_ids": self.unlabeled_ids,
                "validation_ids": self.validation_ids, "test_ids": self.test_ids}


def build_pool(corpus: Corpus, target_corpus: Corpus, n_initial: int, seed: int) -> PoolState:
    """Split the target corpus 50/50 into validation/test and draw the initial labeled set."""
    if len(corpus) == 0 or len(target_corpus) == 0:
        raise ValueError("build_pool: empty corpus")
    if n_initial > len(corpus):
        raise ValueError(f"n_initial={n_initial} exceeds pool size {len(corpus)}")
    if n_initial < 0:
        raise ValueError("n_initial must be >= 0")
    rng = np.random.default_rng(seed)
    targets = target_corpus.ids()
    perm = rng.permutation(len(targets))
    n_val = len(targets) // 2
    validation = [targets[i] for i in perm[:n_val]]
    test = [targets[i] for i in perm[n_val:]]
    pool_ids = corpus.ids()
    chosen = rng.choice(len(pool_ids), size=n_initial, replace=False)
    labeled = [pool_ids[i] for i in chosen]
    unlabeled = sorted(set(pool_ids).difference(labeled))
    return PoolState(labeled, unlabeled, validation, test)
