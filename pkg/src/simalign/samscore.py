"""Similarity matrix -> same-resolution matching-score matrix.

Three interchangeable scorers:

* ``identity`` clamps negative similarities to zero;
* ``line`` enhances short straight streaks against their local background;
* ``conv`` is a small fully-convolutional network trained to regress
  Gaussian heatmaps drawn along annotated copy segments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import GroundTruthSegment, ScoreMatrix, SimilarityMatrix, atomic_write_text

DEFAULT_SLOPES = (0.5, 2.0 / 3.0, 1.0, 1.5, 2.0)
DEFAULT_LINE_LENGTH = 15
DEFAULT_SIGMA = 1.5
SCORERS = ("identity", "line", "conv")
_ALIASES = {"identity-clamp": "identity", "line-enhance": "line"}


# ---------------------------------------------------------------------------
# heatmap targets
# ---------------------------------------------------------------------------


def _segment_distance(qq: np.ndarray, rr: np.ndarray, a: tuple[float, float], b: tuple[float, float]) -> np.ndarray:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    denom = dx * dx + dy * dy
    if denom == 0:
        return np.hypot(qq - ax, rr - ay)
    t = np.clip(((qq - ax) * dx + (rr - ay) * dy) / denom, 0.0, 1.0)
    return np.hypot(qq - (ax + t * dx), rr - (ay + t * dy))


def heatmap_target(segments: Sequence[GroundTruthSegment], shape: tuple[int, int], sigma: float = DEFAULT_SIGMA,
                   query_id: str = "", ref_id: str = "") -> ScoreMatrix:
    """Gaussian ridge along each segment's diagonal, combined by maximum.

    Cell (i, j) sits at point (i, j); a segment runs from (q_start, r_start)
    to (q_end, r_end).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.zeros(shape, dtype=np.float64)
    if segments:
        qq, rr = np.meshgrid(np.arange(shape[0], dtype=np.float64), np.arange(shape[1], dtype=np.float64), indexing="ij")
        for s in segments:
            d = _segment_distance(qq, rr, (s.q_start, s.r_start), (s.q_end, s.r_end))
            np.maximum(out, np.exp(-d * d / (2.0 * sigma * sigma)), out=out)
        query_id = query_id or segments[0].query_id
        ref_id = ref_id or segments[0].ref_id
    return ScoreMatrix(query_id, ref_id, out)


# ---------------------------------------------------------------------------
# line enhancement
# ---------------------------------------------------------------------------


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(int)


def line_offsets(slope: float, length: int) -> np.ndarray:
    """(dq, dr) offsets of a ``length``-cell digital segment of ``slope`` centred at 0.

    The longer axis advances one cell per step, so a slope and its inverse give
    transposed offset sets.
    """
    h = (length - 1) // 2
    t = np.arange(-h, h + 1)
    if slope <= 1.0:
        return np.column_stack([t, _round_half_up(slope * t)])
    return np.column_stack([_round_half_up(t / slope), t])


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window around every cell; ``a`` is pre-padded by ``radius``."""
    c = np.cumsum(np.cumsum(np.pad(a, ((1, 0), (1, 0))), axis=0), axis=1)
    k = 2 * radius + 1
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def line_enhance_score(m: SimilarityMatrix, slopes: Sequence[float] = DEFAULT_SLOPES,
                       length: int = DEFAULT_LINE_LENGTH) -> ScoreMatrix:
    """Best (line mean - surrounding window mean) over candidate slopes, clamped to [0, 1].

    The surrounding window is ``(length + 4)`` square and excludes the line
    cells; cells outside the matrix are ignored rather than zero-filled.
    """
    if length < 5 or length % 2 == 0:
        raise ValueError("line length must be odd and >= 5")
    for k in slopes:
        if not 0.25 <= k <= 4.0:
            raise ValueError(f"slope {k} outside [1/4, 4]")
    v = m.values
    if min(v.shape) < length:
        return ScoreMatrix(m.query_id, m.ref_id, np.clip(v, 0.0, 1.0), m.orig_shape)

    q, r = v.shape
    rad = (length + 4) // 2
    # both means are shift invariant; centring keeps the integral image exact on flat input
    vp = np.pad(v - np.median(v), rad)
    ones = np.pad(np.ones_like(v), rad)
    win_sum = _box_sum(vp, rad)
    win_cnt = _box_sum(ones, rad)

    best = np.full(v.shape, -np.inf)
    for k in slopes:
        line_sum = np.zeros_like(v)
        line_cnt = np.zeros_like(v)
        for dq, dr in line_offsets(k, length):
            line_sum += vp[rad + dq:rad + dq + q, rad + dr:rad + dr + r]
            line_cnt += ones[rad + dq:rad + dq + q, rad + dr:rad + dr + r]
        line_mean = line_sum / line_cnt
        rest = win_cnt - line_cnt
        bg_mean = np.divide(win_sum - line_sum, rest, out=np.zeros_like(v), where=rest > 0)
        np.maximum(best, line_mean - bg_mean, out=best)
    return ScoreMatrix(m.query_id, m.ref_id, np.clip(best, 0.0, 1.0), m.orig_shape)


# ---------------------------------------------------------------------------
# convolutional scorer
# ---------------------------------------------------------------------------

LAYER_CHANNELS = ((1, 8), (8, 8), (8, 1))


@dataclass(eq=False)
class ConvScorer:
    """Three 3x3 same-padded convolutions: ReLU, ReLU, sigmoid."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, seed: int = 42, channels=LAYER_CHANNELS) -> "ConvScorer":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for cin, cout in channels:
            fan_in, fan_out = cin * 9, cout * 9
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-lim, lim, size=(cout, cin, 3, 3)))
            bs.append(np.zeros(cout))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, channels=LAYER_CHANNELS) -> "ConvScorer":
        return cls([np.zeros((co, ci, 3, 3)) for ci, co in channels], [np.zeros(co) for _, co in channels])

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "ConvScorer":
        return ConvScorer([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_json(self) -> dict:
        return {
            "architecture": "conv3x3-relu-relu-sigmoid",
            "layers": [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ConvScorer":
        ws, bs = [], []
        for layer in doc["layers"]:
            shape = tuple(layer["shape"])
            ws.append(np.array(layer["weights"], dtype=np.float64).reshape(shape))
            bs.append(np.array(layer["bias"], dtype=np.float64))
        return cls(ws, bs)

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "ConvScorer":
        return cls.from_json(json.loads(Path(path).read_text()))


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C, H, W, 3, 3) windows of the zero-padded input."""
    return sliding_window_view(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))), (3, 3), axis=(2, 3))


def _conv(cols: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # B, H, W, O
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _forward(model: ConvScorer, x: np.ndarray):
    acts, cols_cache, pre = x, [], []
    n = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        cols = _im2col(acts)
        z = _conv(cols, w, b)
        cols_cache.append(cols)
        pre.append(z)
        acts = np.maximum(z, 0.0) if i < n - 1 else z
    return acts, cols_cache, pre  # acts = output logits


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def loss_and_grads(model: ConvScorer, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean pixelwise BCE of a (B, 1, H, W) batch and its gradient per parameter."""
    z, cols_cache, pre = _forward(model, x)
    loss = bce_with_logits(z, y)
    g = (_sigmoid(z) - y) / z.size
    grads_w, grads_b = [], []
    for i in range(len(model.weights) - 1, -1, -1):
        if i < len(model.weights) - 1:
            g = g * (pre[i] > 0)
        cols = cols_cache[i]
        grads_w.append(np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])))
        grads_b.append(g.sum(axis=(0, 2, 3)))
        if i > 0:
            flipped = model.weights[i][:, :, ::-1, ::-1]
            g = np.tensordot(_im2col(g), flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    grads_w.reverse()
    grads_b.reverse()
    return loss, [p for pair in zip(grads_w, grads_b) for p in pair]


def conv_forward(model: ConvScorer, m: SimilarityMatrix) -> ScoreMatrix:
    if min(m.shape) < 3:
        raise ValueError("conv scorer needs at least a 3x3 input")
    z, _, _ = _forward(model, m.values[None, None])
    return ScoreMatrix(m.query_id, m.ref_id, _sigmoid(z[0, 0]), m.orig_shape)


@dataclass
class TrainResult:
    model: ConvScorer
    initial_loss: float
    history: list[float] = field(default_factory=list)


def _dataset_loss(model: ConvScorer, xs: np.ndarray, ys: np.ndarray, batch: int) -> float:
    total = 0.0
    for s in range(0, len(xs), batch):
        z, _, _ = _forward(model, xs[s:s + batch])
        total += bce_with_logits(z, ys[s:s + batch]) * len(z)
    return total / len(xs)


def conv_train(model: ConvScorer, dataset: Sequence[tuple[SimilarityMatrix, ScoreMatrix]], epochs: int = 30,
               lr: float = 0.01, batch: int = 8, seed: int = 0, optimizer: str = "adam") -> TrainResult:
    """Mini-batch training on pixelwise BCE; returns the model and per-epoch mean batch loss.

    ``optimizer`` is ``"adam"`` (default) or plain ``"sgd"``. Batch order is
    a seeded permutation per epoch, so runs are reproducible.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    shape = dataset[0][0].shape
    for i, (m, t) in enumerate(dataset):
        if m.shape != t.shape or m.shape != shape:
            raise ValueError(f"sample {i}: input {m.shape} / target {t.shape} shape mismatch")
    xs = np.stack([m.values for m, _ in dataset])[:, None]
    ys = np.stack([t.values for _, t in dataset])[:, None]
    model = model.copy()
    params = model.params()
    rng = np.random.default_rng(seed)
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    result = TrainResult(model, _dataset_loss(model, xs, ys, batch))
    for _ in range(epochs):
        order = rng.permutation(len(xs))
        losses = []
        for s in range(0, len(order), batch):
            idx = order[s:s + batch]
            loss, grads = loss_and_grads(model, xs[idx], ys[idx])
            losses.append(loss * len(idx))
            step += 1
            for p, g, a, v in zip(params, grads, m1, m2):
                if optimizer == "sgd":
                    p -= lr * g
                    continue
                a *= b1
                a += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= lr * (a / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        result.history.append(float(sum(losses) / len(xs)))
    return result


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def identity_score(m: SimilarityMatrix) -> ScoreMatrix:
    return ScoreMatrix(m.query_id, m.ref_id, np.clip(m.values, 0.0, 1.0), m.orig_shape)


def normalize_scorer(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in SCORERS:
        raise ValueError(f"unknown scorer {name!r}; expected one of {', '.join(SCORERS)}")
    return name


def score_pair(m: SimilarityMatrix, scorer: str = "identity", model: ConvScorer | None = None,
               slopes: Sequence[float] = DEFAULT_SLOPES, length: int = DEFAULT_LINE_LENGTH) -> ScoreMatrix:
    scorer = normalize_scorer(scorer)
    if scorer == "identity":
        return identity_score(m)
    if scorer == "line":
        return line_enhance_score(m, slopes, length)
    if model is None:
        raise ValueError("the conv scorer needs a trained model")
    return conv_forward(model, m)


def select_query_segment(regions: Sequence, score_matrices: Sequence[ScoreMatrix]) -> int:
    """Index of the region whose score matrix has the largest cell (first on ties)."""
    if not regions or not score_matrices:
        raise ValueError("need at least one region with a score matrix")
    if len(regions) != len(score_matrices):
        raise ValueError("one score matrix per region is required")
    peaks = [float(np.max(s.values)) for s in score_matrices]
    return int(np.argmax(peaks))
