"""Minimal differentiable kernels for the segmentation network.

Every kernel is a forward/backward pair over channels-last (N, H, W, C)
numpy arrays.  Forward functions return ``(output, cache)``; backward
functions take the upstream gradient plus that cache.  Kernels are dtype-generic: training runs in
float32, gradient checks run the same code in float64.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        super().__init__(f"non-finite gradient in parameters: {', '.join(self.names)}")


# ---------------------------------------------------------------------------
# Convolution family
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, padding: int = 1):
    """Stride-1 cross-correlation with symmetric zero padding.

    ``x`` is (N, H, W, C), ``w`` is (O, C, kh, kw), ``b`` is (O,).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    n, h, wd, c = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weights expect {ci}")
    ho = h + 2 * padding - kh + 1
    wo = wd + 2 * padding - kw + 1
    wm = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    if kh == 1 and kw == 1 and padding == 0:
        cols = x.reshape(n * h * wd, c)
    else:
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
        cols = cols.reshape(n * ho * wo, kh * kw * c)
    out = cols @ wm
    out += b
    return out.reshape(n, ho, wo, o), (x.shape, cols, w, padding)


def conv2d_backward(dout: np.ndarray, cache):
    x_shape, cols, w, padding = cache
    n, h, wd, c = x_shape
    o, _, kh, kw = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    d = dout.reshape(-1, o)
    wm = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    dw = (cols.T @ d).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
    db = d.sum(axis=0, dtype=np.float64).astype(dout.dtype)
    dcols = d @ wm.T
    if kh == 1 and kw == 1 and padding == 0:
        return dcols.reshape(x_shape), dw, db
    dcols = dcols.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding, :]
    return dxp, dw, db


def transposed_conv2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """2x2, stride-2 transposed convolution on (N, H, W, C); ``w`` is (C_in, C_out, 2, 2)."""
    n, h, wd, c = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"transposed_conv2 channel mismatch: input has {c}, weights expect {ci}")
    if (kh, kw) != (2, 2):
        raise ShapeError("transposed_conv2 requires a 2x2 kernel")
    xf = x.reshape(-1, c)
    y = (xf @ w.reshape(c, o * 4)).reshape(n, h, wd, o, 2, 2)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h, 2 * wd, o)
    out += b
    return out, (xf, x.shape, w)


def transposed_conv2_backward(dout: np.ndarray, cache):
    xf, x_shape, w = cache
    n, h, wd, c = x_shape
    o = w.shape[1]
    db = dout.sum(axis=(0, 1, 2), dtype=np.float64).astype(dout.dtype)
    d = dout.reshape(n, h, 2, wd, 2, o).transpose(0, 1, 3, 5, 2, 4).reshape(-1, o * 4)
    dw = (xf.T @ d).reshape(w.shape)
    dx = (d @ w.reshape(c, o * 4).T).reshape(x_shape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Pooling, concatenation, activations
# ---------------------------------------------------------------------------


def maxpool2_forward(x: np.ndarray):
    """2x2/stride-2 max pool on (N, H, W, C); ties go to the lowest row-major index."""
    n, h, wd, c = x.shape
    if h % 2 or wd % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{wd}")
    blocks = x.reshape(n, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, wd // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool2_backward(dout: np.ndarray, cache):
    arg, x_shape = cache
    n, h, wd, c = x_shape
    blocks = np.zeros((n, h // 2, wd // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    dx = blocks.reshape(n, h // 2, wd // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(n, h, wd, c)


def concat_channels_forward(a: np.ndarray, b: np.ndarray):
    if a.shape[:3] != b.shape[:3]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def concat_channels_backward(dout: np.ndarray, split: int):
    return dout[..., :split], dout[..., split:]


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray):
    return dout * mask


def sigmoid_forward(x: np.ndarray):
    out = expit(x)
    return out, out


def sigmoid_backward(dout: np.ndarray, out: np.ndarray):
    return dout * out * (1 - out)


def spatial_dropout_forward(x: np.ndarray, rate: float, rng: np.random.Generator | None = None,
                            mask: np.ndarray | None = None):
    """Inverted channel dropout on (N, H, W, C).

    Returns ``(output, mask)`` where ``mask`` has shape (N, 1, 1, C) and holds
    either 0 or 1/(1-rate).  Passing a precomputed ``mask`` replays it.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    n, c = x.shape[0], x.shape[-1]
    if mask is None:
        if rate == 0:
            mask = np.ones((n, 1, 1, c), dtype=x.dtype)
        else:
            if rng is None:
                raise ValueError("spatial dropout with rate > 0 needs a random generator")
            keep = rng.random((n, c)) >= rate
            mask = (keep / (1.0 - rate)).astype(x.dtype).reshape(n, 1, 1, c)
    return x * mask, mask


def spatial_dropout_backward(dout: np.ndarray, mask: np.ndarray):
    return dout * mask


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def bce_loss(prob: np.ndarray, target: np.ndarray, valid: np.ndarray | None = None):
    """Mean binary cross-entropy over valid pixels.

    Returns ``(loss, dprob)``; ``dprob`` has the dtype of ``prob`` and is zero
    on invalid pixels.
    """
    p = np.clip(prob.astype(np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = target.astype(np.float64)
    if valid is None:
        valid = np.ones(prob.shape, dtype=bool)
    valid = np.broadcast_to(valid, prob.shape)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("bce_loss: no valid pixels")
    terms = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    loss = float(terms[valid].sum() / n_valid)
    grad = np.where(valid, (p - y) / (p * (1 - p)) / n_valid, 0.0)
    return loss, grad.astype(prob.dtype)


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
                    dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AdamW:
    """Decoupled weight-decay Adam with bias correction."""

    learning_rate: float = 5e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Iterable[Parameter]) -> None:
        params = list(params)
        bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
        if bad:
            raise NonFiniteGradientError(bad)
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for p in params:
            m = self.first_moment.get(p.name)
            if m is None:
                m = self.first_moment[p.name] = np.zeros(p.value.shape, dtype=np.float64)
                self.second_moment[p.name] = np.zeros(p.value.shape, dtype=np.float64)
            v = self.second_moment[p.name]
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            value = p.value.astype(np.float64)
            value *= 1 - self.learning_rate * self.weight_decay
            value -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.value[...] = value


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f: Callable[[], float], array: np.ndarray, step: float = 1e-6,
                     indices: Iterable[tuple[int, ...]] | None = None) -> dict[tuple[int, ...], float]:
    """Central differences of scalar ``f`` w.r.t. entries of ``array`` (perturbed in place)."""
    if indices is None:
        indices = np.ndindex(array.shape)
    out = {}
    for idx in indices:
        orig = array[idx]
        array[idx] = orig + step
        fp = f()
        array[idx] = orig - step
        fm = f()
        array[idx] = orig
        out[idx] = (fp - fm) / (2 * step)
    return out


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter: dict[str, float]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_relative_error)) and self.max_relative_error < self.tolerance


def grad_check(network, x: np.ndarray, tolerance: float = 1e-3, step: float = 1e-6,
               max_entries: int | None = None, seed: int = 0,
               dropout_mask: np.ndarray | None = None) -> GradCheckReport:
    """Compare analytic parameter gradients of ``network`` against central differences.

    The network output is scalarized as ``sum(out * R)`` with a fixed random
    ``R``.  ``network`` must provide ``parameters()``, ``forward(x, dropout_mask=...)``
    returning ``(out, cache)`` and ``backward(dout, cache)`` filling ``Parameter.grad``.
    With ``max_entries`` set, a seeded subset of each parameter's entries is checked.
    """
    rng = np.random.default_rng(seed)
    out, cache = network.forward(x, dropout_mask=dropout_mask)
    weights = rng.standard_normal(out.shape).astype(out.dtype)
    params = network.parameters()
    zero_grads(params)
    network.backward(weights, cache)

    def loss() -> float:
        o, _ = network.forward(x, dropout_mask=dropout_mask)
        return float(np.sum(o.astype(np.float64) * weights))

    per_param = {}
    worst = 0.0
    n_checked = 0
    for p in params:
        if max_entries is not None and p.value.size > max_entries:
            flat = rng.choice(p.value.size, size=max_entries, replace=False)
            idxs = [np.unravel_index(i, p.value.shape) for i in np.sort(flat)]
        else:
            idxs = list(np.ndindex(p.value.shape))
        num = numeric_gradient(loss, p.value, step, idxs)
        analytic = np.array([p.grad[i] for i in idxs])
        numeric = np.array([num[i] for i in idxs])
        err = float(relative_error(analytic, numeric).max()) if idxs else 0.0
        per_param[p.name] = err
        worst = max(worst, err) if np.isfinite(err) else float("inf")
        n_checked += len(idxs)
    return GradCheckReport(worst, per_param, n_checked, tolerance)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   b"FCK1" | u32 header_len | header_len bytes of UTF-8 JSON | float32 payload
# The header's "params" list gives name, shape and element offset of each
# parameter inside the payload, in payload order.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FCK1"


def save_checkpoint(path: str | Path, params: Sequence[Parameter], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for p in params:
        entries.append({"name": p.name, "shape": list(p.value.shape), "offset": offset})
        offset += p.value.size
    header = dict(meta or {})
    header["params"] = entries
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad magic")
    if len(raw) < 8:
        raise ValueError("truncated payload")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[8 + hlen:], dtype="<f4")
    values = {}
    for e in header["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = payload[e["offset"]:e["offset"] + size]
        if chunk.size != size:
            raise ValueError("truncated payload")
        values[e["name"]] = chunk.reshape(e["shape"]).astype(np.float32)
    return header, values
