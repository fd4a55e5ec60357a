"""Similarity-matrix construction, canvas fitting and multi-model ensembling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingSequence, SimilarityMatrix, ValidationError

CANVAS_SIZE = 128


def cosine_similarity_matrix(q: EmbeddingSequence, r: EmbeddingSequence) -> SimilarityMatrix:
    """Frame-by-frame dot products of two unit-norm embedding sequences.

    Zero (padding) rows yield zero similarity against everything.
    """
    if q.dim != r.dim:
        raise ValidationError(f"embedding dimension mismatch: {q.dim} vs {r.dim}")
    return SimilarityMatrix(q.video_id, r.video_id, q.frames @ r.frames.T)


def fit_to_canvas(m: SimilarityMatrix, size: int = CANVAS_SIZE) -> SimilarityMatrix:
    """Crop the top-left ``size`` x ``size`` block and zero-pad the rest.

    The pre-canvas shape is kept in ``orig_shape`` so that cells can be mapped
    back to seconds. Calling this on an already fitted matrix is a no-op.
    """
    if size < 1:
        raise ValueError("canvas size must be >= 1")
    q, r = m.shape
    keep_q, keep_r = min(q, size), min(r, size)
    canvas = np.zeros((size, size), dtype=np.float64)
    canvas[:keep_q, :keep_r] = m.values[:keep_q, :keep_r]
    orig = m.orig_shape if m.orig_shape is not None else (q, r)
    return type(m)(m.query_id, m.ref_id, canvas, orig)


def retained_shape(m: SimilarityMatrix) -> tuple[int, int]:
    """Number of canvas rows/columns that hold real (non-padding) seconds."""
    q, r = m.source_shape
    return min(q, m.shape[0]), min(r, m.shape[1])


def cell_to_seconds(m: SimilarityMatrix, q_cell: int, r_cell: int) -> tuple[float, float]:
    """Start time in seconds of a canvas cell (1 frame per second, head-anchored)."""
    kq, kr = retained_shape(m)
    if not (0 <= q_cell < kq and 0 <= r_cell < kr):
        raise ValueError(f"cell ({q_cell}, {r_cell}) outside retained range {kq}x{kr}")
    return float(q_cell), float(r_cell)


def seconds_to_cell(m: SimilarityMatrix, q_sec: float, r_sec: float) -> tuple[int, int]:
    kq, kr = retained_shape(m)
    qi, ri = int(np.floor(q_sec)), int(np.floor(r_sec))
    if not (0 <= qi < kq and 0 <= ri < kr):
        raise ValueError(f"time ({q_sec}, {r_sec}) falls outside the canvas")
    return qi, ri


# ---------------------------------------------------------------------------
# PCA via cyclic Jacobi
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # k x D, orthonormal rows
    eigenvalues: np.ndarray  # k, descending

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def k(self) -> int:
        return self.components.shape[0]


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of n/2 disjoint index pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by parallel-ordered Jacobi rotations.

    Each round rotates a set of disjoint (p, q) pairs at once, so a sweep is
    n-1 vectorised rounds. Returns (eigenvalues descending, eigenvectors as
    columns).
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    n = a.shape[0]
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    size = n + (n % 2)
    if size != n:
        a = np.pad(a, ((0, 1), (0, 1)))
    v = np.eye(size)
    rounds = _round_robin(size) if size > 1 else []
    scale = max(1.0, float(np.linalg.norm(a)))

    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off < tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            big = np.abs(tau) > 1e150
            safe = np.where(big, 0.0, tau)
            t = np.where(big, 0.5 / np.where(big, tau, 1.0), np.sign(safe) / (np.abs(safe) + np.sqrt(1.0 + safe * safe)))
            t[tau == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- A J  (columns)
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            # A <- J^T A  (rows)
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq

    # the zero dummy axis (odd n) is decoupled and never rotated
    w = np.diag(a)[:n].copy()
    vecs = v[:n, :n]
    order = np.argsort(-w, kind="stable")
    return w[order], vecs[:, order]


def _canonical_sign(components: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def pca_fit(rows: np.ndarray, k: int) -> PcaModel:
    """Top-``k`` principal axes of ``rows`` (population covariance)."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("rows must be an N x D matrix")
    n, d = x.shape
    if k < 1 or k > min(n - 1, d):
        raise ValueError(f"k={k} must lie in [1, min(N-1, D)] = [1, {min(n - 1, d)}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    w, vecs = jacobi_eigh(cov)
    comps = _canonical_sign(vecs[:, :k].T)
    return PcaModel(mean, comps, np.clip(w[:k], 0.0, None))


def pca_project(model: PcaModel, seq: EmbeddingSequence, eps: float = 1e-12) -> EmbeddingSequence:
    if seq.dim != model.dim:
        raise ValidationError(f"embedding dimension {seq.dim} does not match PCA input {model.dim}")
    frames = seq.frames
    proj = (frames - model.mean) @ model.components.T
    norms = np.linalg.norm(proj, axis=1)
    padding = ~np.any(frames != 0.0, axis=1)
    degenerate = padding | (norms <= eps)
    out = np.zeros_like(proj)
    ok = ~degenerate
    out[ok] = proj[ok] / norms[ok, None]
    return EmbeddingSequence(seq.video_id, f"{seq.model_id}+pca{model.k}", out)


def ensemble_similarity(ms: list[SimilarityMatrix]) -> SimilarityMatrix:
    """Cell-wise mean of matrices computed for the same pair by different models."""
    if not ms:
        raise ValueError("need at least one matrix")
    first = ms[0]
    for m in ms[1:]:
        if m.shape != first.shape:
            raise ValidationError(f"shape mismatch {m.shape} vs {first.shape}")
        if m.pair != first.pair:
            raise ValidationError(f"pair mismatch {m.pair} vs {first.pair}")
    stacked = np.stack([m.values for m in ms])
    # sorted sum keeps the result independent of argument order
    mean = np.sort(stacked, axis=0).sum(axis=0) / len(ms)
    origs = {m.orig_shape for m in ms}
    orig = origs.pop() if len(origs) == 1 else None
    return SimilarityMatrix(first.query_id, first.ref_id, mean, orig)
