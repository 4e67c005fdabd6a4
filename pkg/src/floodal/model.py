"""U-Net segmenter with a spatial-dropout head, training loop and MC-dropout inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .data import FLOOD, LabelMask, Tile
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class UNetConfig:
    in_channels: int = 3
    depth: int = 2
    base_channels: int = 16
    dropout_rate: float = 0.5

    def validate(self) -> list[str]:
        errors = []
        if self.in_channels < 1:
            errors.append("in_channels must be >= 1")
        if self.depth < 1:
            errors.append("depth must be >= 1")
        if self.base_channels < 1:
            errors.append("base_channels must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            errors.append("dropout_rate must be in [0, 1)")
        return errors


@dataclass
class TrainConfig:
    max_epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 5e-4
    weight_decay: float = 1e-2
    early_stop_delta: float = 5e-4
    early_stop_patience: int = 5
    flip_augment: bool = True
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.max_epochs < 1:
            errors.append("max_epochs must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.learning_rate < 0:
            errors.append("learning_rate must be >= 0")
        if self.weight_decay < 0:
            errors.append("weight_decay must be >= 0")
        if self.early_stop_delta < 0:
            errors.append("early_stop_delta must be >= 0")
        if self.early_stop_patience < 1:
            errors.append("early_stop_patience must be >= 1")
        return errors


class TrainingDiverged(RuntimeError):
    pass


def clamp_prob(p: np.ndarray) -> np.ndarray:
    """Keep probabilities strictly inside (0, 1) in their own dtype."""
    hi = np.nextafter(p.dtype.type(1), p.dtype.type(0))
    return np.clip(p, p.dtype.type(nn.PROB_CLAMP), min(hi, p.dtype.type(1 - nn.PROB_CLAMP)))


class UNet:
    """Encoder/decoder with skip connections and one spatial-dropout layer before the 1x1 head.

    Parameters are stored as :class:`nn.Parameter` in a fixed order, so
    checkpoints and optimizer state are reproducible.
    """

    def __init__(self, config: UNetConfig, seed: int = 0, dtype=np.float32):
        errors = config.validate()
        if errors:
            raise ValueError("; ".join(errors))
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self._params: dict[str, nn.Parameter] = {}

        def conv(name, cin, cout, k=3):
            fan_in = cin * k * k
            self._add(f"{name}.w", nn.kaiming_uniform((cout, cin, k, k), fan_in, rng, dtype))
            self._add(f"{name}.b", np.zeros(cout, dtype=dtype))

        def up(name, cin, cout):
            self._add(f"{name}.w", nn.kaiming_uniform((cin, cout, 2, 2), cin * 4, rng, dtype))
            self._add(f"{name}.b", np.zeros(cout, dtype=dtype))

        c = config.base_channels
        cin = config.in_channels
        for level in range(config.depth):
            cout = c * 2 ** level
            conv(f"enc{level}.conv1", cin, cout)
            conv(f"enc{level}.conv2", cout, cout)
            cin = cout
        cb = c * 2 ** config.depth
        conv("bottleneck.conv1", cin, cb)
        conv("bottleneck.conv2", cb, cb)
        cin = cb
        for level in reversed(range(config.depth)):
            cout = c * 2 ** level
            up(f"dec{level}.up", cin, cout)
            conv(f"dec{level}.conv1", 2 * cout, cout)
            conv(f"dec{level}.conv2", cout, cout)
            cin = cout
        conv("head", cin, 1, k=1)

    def _add(self, name, value):
        self._params[name] = nn.Parameter(name, value)

    def parameters(self) -> list[nn.Parameter]:
        return list(self._params.values())

    def param(self, name: str) -> np.ndarray:
        return self._params[name].value

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def get_state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self._params.items():
            p.value[...] = state[k]

    # -- forward / backward -------------------------------------------------

    def _conv_relu(self, name, x, caches):
        y, c1 = nn.conv2d_forward(x, self.param(f"{name}.w"), self.param(f"{name}.b"))
        y, c2 = nn.relu_forward(y)
        caches.append((name, c1, c2))
        return y

    def features(self, x: np.ndarray):
        """Deterministic trunk up to the last decoder block (everything before dropout)."""
        self._check_input(x)
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        caches = []
        skips = []
        for level in range(self.config.depth):
            x = self._conv_relu(f"enc{level}.conv1", x, caches)
            x = self._conv_relu(f"enc{level}.conv2", x, caches)
            skips.append(x)
            x, pc = nn.maxpool2_forward(x)
            caches.append(("pool", pc, level))
        x = self._conv_relu("bottleneck.conv1", x, caches)
        x = self._conv_relu("bottleneck.conv2", x, caches)
        for level in reversed(range(self.config.depth)):
            x, uc = nn.transposed_conv2_forward(x, self.param(f"dec{level}.up.w"), self.param(f"dec{level}.up.b"))
            caches.append((f"dec{level}.up", uc, None))
            x, split = nn.concat_channels_forward(x, skips[level])
            caches.append(("concat", split, level))
            x = self._conv_relu(f"dec{level}.conv1", x, caches)
            x = self._conv_relu(f"dec{level}.conv2", x, caches)
        return x, caches

    def head_logits(self, feats: np.ndarray, dropout_mask: np.ndarray | None = None,
                    rng: np.random.Generator | None = None):
        active = rng is not None or dropout_mask is not None
        rate = self.config.dropout_rate if active else 0.0
        d, mask = nn.spatial_dropout_forward(feats, rate, rng, mask=dropout_mask)
        logits, hc = nn.conv2d_forward(d, self.param("head.w"), self.param("head.b"), padding=0)
        return logits, (mask, hc)

    def forward(self, x: np.ndarray, dropout_mask: np.ndarray | None = None,
                rng: np.random.Generator | None = None):
        """Probability map (N, 1, H, W) for an (N, C, H, W) input.

        Dropout is active when ``rng`` (fresh mask) or ``dropout_mask`` (replayed
        mask) is given; otherwise inference is deterministic.
        """
        feats, caches = self.features(x)
        logits, hcache = self.head_logits(feats, dropout_mask, rng)
        prob, sc = nn.sigmoid_forward(logits)
        n, h, w, _ = prob.shape
        return clamp_prob(prob).reshape(n, 1, h, w), (caches, hcache, sc)

    def backward(self, dprob: np.ndarray, cache) -> None:
        caches, hcache, sigm = cache
        dlogits = nn.sigmoid_backward(dprob.reshape(sigm.shape), sigm)
        n, h, w, _ = sigm.shape
        self.backward_logits(dlogits.reshape(n, 1, h, w), (caches, hcache))

    def backward_logits(self, dlogits: np.ndarray, cache) -> None:
        """Accumulate parameter gradients given d(loss)/d(logits) shaped (N, 1, H, W)."""
        caches, (mask, hc) = cache
        n, _, h, w = dlogits.shape
        dl = dlogits.astype(self.dtype, copy=False).reshape(n, h, w, 1)
        dx, dw, db = nn.conv2d_backward(dl, hc)
        self._params["head.w"].grad += dw
        self._params["head.b"].grad += db
        dx = nn.spatial_dropout_backward(dx, mask)
        skip_grads = {}
        for name, c1, c2 in reversed(caches):
            if name == "pool":
                # c2 is the level; its conv2 output also fed the decoder skip
                dx = nn.maxpool2_backward(dx, c1) + skip_grads.pop(c2)
            elif name == "concat":
                dx, skip_grads[c2] = nn.concat_channels_backward(dx, c1)
            else:
                if name.endswith(".up"):
                    dx, dw, db = nn.transposed_conv2_backward(dx, c1)
                else:
                    dx = nn.relu_backward(dx, c2)
                    dx, dw, db = nn.conv2d_backward(dx, c1)
                self._params[f"{name}.w"].grad += dw
                self._params[f"{name}.b"].grad += db

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise nn.ShapeError(f"expected (N, {self.config.in_channels}, H, W) input, got {x.shape}")
        div = 2 ** self.config.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise nn.ShapeError(f"input H, W must be divisible by {div}, got {x.shape[2:]}")


def build_unet(config: UNetConfig, seed: int = 0) -> UNet:
    return UNet(config, seed)


def parameter_count(config: UNetConfig) -> int:
    """Closed-form parameter count of :class:`UNet` for ``config``."""
    c, cin = config.base_channels, config.in_channels
    total = 0
    for level in range(config.depth):
        cout = c * 2 ** level
        total += 9 * cin * cout + cout + 9 * cout * cout + cout
        cin = cout
    cb = c * 2 ** config.depth
    total += 9 * cin * cb + cb + 9 * cb * cb + cb
    cin = cb
    for level in reversed(range(config.depth)):
        cout = c * 2 ** level
        total += 4 * cin * cout + cout
        total += 9 * 2 * cout * cout + cout + 9 * cout * cout + cout
        cin = cout
    return total + cin + 1


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def stack_samples(samples: Sequence[tuple[Tile, LabelMask]]):
    """(x, target, valid) arrays shaped (N, C, H, W), (N, 1, H, W), (N, 1, H, W)."""
    x = np.stack([t.pixels for t, _ in samples]).astype(np.float32)
    classes = np.stack([m.classes for _, m in samples])[:, None]
    return x, (classes == FLOOD).astype(np.float32), classes != 255


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    stopped: bool = False


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "stopped_flag"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), int(e.stopped)])


def evaluate_loss(network: UNet, x: np.ndarray, y: np.ndarray, valid: np.ndarray,
                  batch_size: int = 8) -> float:
    """Pixel-weighted BCE over all valid pixels with dropout inactive."""
    total = 0.0
    count = 0
    for i in range(0, len(x), batch_size):
        prob, _ = network.forward(x[i:i + batch_size])
        v = valid[i:i + batch_size]
        n = int(v.sum())
        if n:
            loss, _ = nn.bce_loss(prob, y[i:i + batch_size], v)
            total += loss * n
            count += n
    if count == 0:
        raise ValueError("no valid pixels in evaluation set")
    return total / count


def _flip_batch(rng, xb, yb, vb):
    xb, yb, vb = xb.copy(), yb.copy(), vb.copy()
    flips = rng.random((len(xb), 2)) < 0.5
    for i, (fh, fv) in enumerate(flips):
        if fh:
            xb[i], yb[i], vb[i] = xb[i][..., ::-1], yb[i][..., ::-1], vb[i][..., ::-1]
        if fv:
            xb[i], yb[i], vb[i] = xb[i][:, ::-1], yb[i][:, ::-1], vb[i][:, ::-1]
    return xb, yb, vb


def train(network: UNet, labeled: Sequence[tuple[Tile, LabelMask]],
          validation: Sequence[tuple[Tile, LabelMask]], config: TrainConfig,
          progress=None) -> tuple[UNet, TrainHistory]:
    """Mini-batch AdamW training with flip augmentation and early stopping on validation BCE.

    The network is left holding the parameters of the best validation epoch.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if not labeled or not validation:
        raise ValueError("train needs at least one labeled and one validation tile")
    rng = np.random.default_rng(config.seed)
    x, y, valid = stack_samples(labeled)
    xv, yv, validv = stack_samples(validation)
    opt = nn.AdamW(config.learning_rate, config.weight_decay)
    params = network.parameters()
    history = TrainHistory()
    best_loss = math.inf
    best_state = network.get_state()
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb, vb = x[idx], y[idx], valid[idx]
            if config.flip_augment:
                xb, yb, vb = _flip_batch(rng, xb, yb, vb)
            n_valid = int(vb.sum())
            if n_valid == 0:
                continue
            prob, cache = network.forward(xb, rng=rng)
            loss, _ = nn.bce_loss(prob, yb, vb)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            dlogits = np.where(vb, (prob - yb) / n_valid, 0).astype(np.float32)
            nn.zero_grads(params)
            network.backward_logits(dlogits, (cache[0], cache[1]))
            try:
                opt.step(params)
            except nn.NonFiniteGradientError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            total += loss * n_valid
            count += n_valid
        train_loss = total / count if count else math.nan
        val_loss = evaluate_loss(network, xv, yv, validv, config.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, float(train_loss), float(val_loss))
        history.epochs.append(record)
        if val_loss < best_loss - config.early_stop_delta:
            best_loss = val_loss
            best_state = network.get_state()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
        if progress is not None:
            progress(record)
        if stale >= config.early_stop_patience:
            record.stopped = True
            break
    network.set_state(best_state)
    return network, history


# ---------------------------------------------------------------------------
# MC-dropout inference
# ---------------------------------------------------------------------------


@dataclass
class StochasticPrediction:
    passes: np.ndarray  # (T, H, W) float32
    calibrated: np.ndarray  # (H, W) float64, per-pixel mean of passes
    tile_id: str = ""

    @property
    def T(self) -> int:
        return self.passes.shape[0]

    @classmethod
    def from_passes(cls, passes: np.ndarray, tile_id: str = "") -> "StochasticPrediction":
        passes = np.asarray(passes)
        if passes.ndim == 2:
            passes = passes[None]
        return cls(passes, passes.astype(np.float64).mean(axis=0), tile_id)


def mc_predict_many(network: UNet, tiles: Sequence[Tile], T: int, seed: int,
                    batch_size: int = 8) -> list[StochasticPrediction]:
    """T dropout-active passes per tile.

    Dropout sits only in front of the 1x1 head, so the trunk is evaluated once
    per tile and the T passes resample the channel mask on the shared
    features; this is numerically the same as T full forward passes.  Pass t
    of a tile draws from the stream ``derive_seed(seed, tile.id, t)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    out = []
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start:start + batch_size]
        x = np.stack([t.pixels for t in chunk]).astype(np.float32)
        feats, _ = network.features(x)
        for i, tile in enumerate(chunk):
            f = feats[i:i + 1]
            passes = np.empty((T, tile.height, tile.width), dtype=np.float32)
            for t in range(T):
                rng = np.random.default_rng(derive_seed(seed, tile.id, t))
                logits, _ = network.head_logits(f, rng=rng)
                passes[t] = clamp_prob(nn.sigmoid_forward(logits)[0])[0, :, :, 0]
            out.append(StochasticPrediction.from_passes(passes, tile.id))
    return out


def mc_predict(network: UNet, tile: Tile, T: int, seed: int) -> StochasticPrediction:
    if tile.channels != network.config.in_channels:
        raise nn.ShapeError(f"tile has {tile.channels} channels, network expects {network.config.in_channels}")
    return mc_predict_many(network, [tile], T, seed)[0]


def predict_binary(prediction: StochasticPrediction, threshold: float = 0.5) -> LabelMask:
    """Flood wherever the calibrated probability is >= ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    return LabelMask((prediction.calibrated >= threshold).astype(np.uint8))
