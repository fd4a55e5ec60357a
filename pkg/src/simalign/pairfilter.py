"""Cheap pair recall plus a logistic filter over pooled similarity-matrix statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import EmbeddingSequence, SimilarityMatrix, atomic_write_text

FEATURE_NAMES = (
    "max",
    "mean",
    "frac_gt_0.5",
    "diag_band",
    "top5_mean",
    "row_max_mean",
    "col_max_mean",
    "log_count_gt_0.7",
)
NUM_FEATURES = len(FEATURE_NAMES)


def video_descriptor(seq: EmbeddingSequence) -> np.ndarray:
    """Normalised mean of the non-padding frame embeddings."""
    frames = seq.frames[np.any(seq.frames != 0.0, axis=1)]
    if len(frames) == 0:
        return np.zeros(seq.dim)
    v = frames.mean(axis=0)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def recall_candidates(descriptors: Mapping[str, np.ndarray], queries: Sequence[str], refs: Sequence[str],
                      tau: float) -> list[tuple[str, str]]:
    """All (query, ref) pairs whose descriptor cosine is at least ``tau``."""
    if not -1.0 <= tau < 1.0:
        raise ValueError("tau must lie in [-1, 1)")
    for vid in list(queries) + list(refs):
        if vid not in descriptors:
            raise KeyError(f"missing descriptor for video {vid!r}")
    if not queries or not refs:
        return []
    qd = np.stack([descriptors[q] for q in queries])
    rd = np.stack([descriptors[r] for r in refs])
    sims = qd @ rd.T
    keep = sims >= tau if tau > -1.0 else np.ones_like(sims, dtype=bool)
    return [(queries[i], refs[j]) for i, j in zip(*np.nonzero(keep))]


def _band_feature(v: np.ndarray) -> float:
    """Best width-3 diagonal band: band sum over the band's longest diagonal."""
    q, r = v.shape
    # diagonal i - j = o  <->  numpy offset -o
    offsets = np.arange(-(r - 1) - 1, q + 1)
    sums = np.array([np.trace(v, offset=-o) if -(r - 1) <= o <= q - 1 else 0.0 for o in offsets])
    lengths = np.array([np.diagonal(v, offset=-o).size if -(r - 1) <= o <= q - 1 else 0 for o in offsets])
    band_sum = sums[:-2] + sums[1:-1] + sums[2:]
    band_len = np.maximum(np.maximum(lengths[:-2], lengths[1:-1]), lengths[2:])
    return float(np.max(band_sum / band_len))


def matrix_features(m: SimilarityMatrix) -> np.ndarray:
    v = m.values
    flat = np.sort(v, axis=None)
    top5 = flat[-5:]
    return np.array([
        v.max(),
        v.mean(),
        (v > 0.5).mean(),
        _band_feature(v),
        top5.mean(),
        v.max(axis=1).mean(),
        v.max(axis=0).mean(),
        math.log1p(int((v > 0.7).sum())),
    ])


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float = 0.0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(NUM_FEATURES))
    scale: np.ndarray = field(default_factory=lambda: np.ones(NUM_FEATURES))
    threshold: float = 0.5
    final_loss: float = float("nan")
    history: list[float] = field(default_factory=list, repr=False)

    @classmethod
    def zero(cls, n: int = NUM_FEATURES) -> "LogisticModel":
        return cls(np.zeros(n), 0.0, np.zeros(n), np.ones(n))

    def standardize(self, feats: np.ndarray) -> np.ndarray:
        return (np.asarray(feats, dtype=np.float64) - self.mean) / self.scale

    def to_json(self) -> dict:
        return {
            "features": list(FEATURE_NAMES),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "threshold": self.threshold,
            "final_loss": self.final_loss,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LogisticModel":
        return cls(np.array(doc["weights"], float), float(doc["bias"]), np.array(doc["mean"], float),
                   np.array(doc["scale"], float), float(doc.get("threshold", 0.5)),
                   float(doc.get("final_loss", float("nan"))))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LogisticModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logistic_loss(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Mean log-loss plus ``lam/2 * |w|^2`` on standardised features."""
    z = x @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * np.dot(w, w))


def logistic_grad(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    r = _sigmoid(x @ w + b) - y
    return x.T @ r / len(y) + lam * w, float(r.mean())


def train_filter(samples: Sequence[tuple[np.ndarray, int]], epochs: int = 500, lr: float = 0.1,
                 lam: float = 1e-4, standardize: bool = True) -> LogisticModel:
    """Full-batch gradient descent from zero weights; losses per epoch are kept in ``history``."""
    if not samples:
        raise ValueError("no training samples")
    x = np.array([np.asarray(f, dtype=np.float64) for f, _ in samples])
    y = np.array([float(lbl) for _, lbl in samples])
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    model = LogisticModel.zero(x.shape[1])
    if standardize:
        model.mean = x.mean(axis=0)
        sd = x.std(axis=0)
        model.scale = np.where(sd > 0, sd, 1.0)
    xs = model.standardize(x)
    w, b = model.weights.copy(), 0.0
    history = [logistic_loss(w, b, xs, y, lam)]
    for _ in range(epochs):
        gw, gb = logistic_grad(w, b, xs, y, lam)
        w -= lr * gw
        b -= lr * gb
        history.append(logistic_loss(w, b, xs, y, lam))
    model.weights, model.bias, model.final_loss = w, b, history[-1]
    model.history = history
    return model


def filter_predict(model: LogisticModel, feats) -> np.ndarray | float:
    """Probability that the pair(s) contain a copy."""
    z = model.standardize(feats) @ model.weights + model.bias
    # keep the probability strictly inside (0, 1) even for saturated logits
    p = np.clip(_sigmoid(z), np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return float(p) if np.ndim(p) == 0 else p


def retention_threshold(probs: np.ndarray, labels: np.ndarray, retain: float = 0.99) -> float:
    """Largest threshold keeping at least ``retain`` of the positives (p >= threshold)."""
    pos = np.sort(np.asarray(probs)[np.asarray(labels) == 1])
    if pos.size == 0:
        raise ValueError("no positives to calibrate on")
    k = int(math.floor((1.0 - retain) * pos.size + 1e-9))
    return float(pos[k])
