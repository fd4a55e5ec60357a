"""From a matching-score matrix to scored copy segments.

threshold -> 8-connected components -> RANSAC line per component ->
candidate score -> segment box, optionally ensembled over several
(threshold, penalty) settings.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .core import ScoreMatrix, SegmentPrediction

ENSEMBLE_PARAMS = ((0.35, 0.5), (0.1, 1.25), (0.001, 2.0))


@dataclass(frozen=True)
class PostprocessParams:
    t: float = 0.35
    alpha: float = 0.5
    ransac_iters: int = 500
    inlier_tol: float = 2.0
    min_component: int = 3
    min_inliers: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("t", "alpha", "inlier_tol"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.min_component < 1 or self.min_inliers < 1 or self.ransac_iters < 1:
            raise ValueError("min_component, min_inliers and ransac_iters must be >= 1")


@dataclass(eq=False)
class MatchCandidate:
    points: np.ndarray  # N x 3: q, r, score
    coef: float
    intercept: float
    inlier_mask: np.ndarray
    s: float
    segment: SegmentPrediction | None = None

    @property
    def inliers(self) -> np.ndarray:
        return self.points[self.inlier_mask]


class RansacError(ValueError):
    pass


def threshold_points(m: ScoreMatrix | np.ndarray, t: float) -> np.ndarray:
    """Cells with value >= ``t`` as an (N, 3) array of (q, r, score), row-major."""
    values = m.values if isinstance(m, ScoreMatrix) else np.asarray(m, dtype=np.float64)
    q, r = np.nonzero(values >= t)
    return np.column_stack([q, r, values[q, r]]).astype(np.float64)


def connected_components(points: np.ndarray, connectivity: int = 8, min_component: int = 1) -> list[np.ndarray]:
    """Group grid points by 4- or 8-adjacency.

    Components are ordered by their smallest row-major member and each keeps
    its points in row-major order; groups smaller than ``min_component`` are
    dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, points.shape[1] if np.ndim(points) == 2 else 3)
    if len(pts) == 0:
        return []
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    ij = pts[:, :2].astype(np.int64)
    lo = ij.min(axis=0)
    ij = ij - lo
    shape = tuple(ij.max(axis=0) + 1)
    grid = np.zeros(shape, dtype=bool)
    grid[ij[:, 0], ij[:, 1]] = True
    structure = ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)
    labels, n = ndimage.label(grid, structure=structure)
    point_labels = labels[ij[:, 0], ij[:, 1]]
    order = np.lexsort((ij[:, 1], ij[:, 0]))
    sorted_pts, sorted_labels = pts[order], point_labels[order]
    # ndimage numbers labels in raster order of first appearance
    out = []
    for lab in range(1, n + 1):
        comp = sorted_pts[sorted_labels == lab]
        if len(comp) >= min_component:
            out.append(comp)
    return out


def _perp_residuals(q: np.ndarray, r: np.ndarray, coef: np.ndarray, intercept: np.ndarray) -> np.ndarray:
    return np.abs(r - (coef * q + intercept)) / np.sqrt(1.0 + coef * coef)


def _pair_indices(n: int, iters: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """All i < j pairs if there are at most ``iters``, else ``iters`` distinct random ones."""
    total = n * (n - 1) // 2
    if total <= iters:
        return np.triu_indices(n, k=1)
    k = np.sort(rng.choice(total, size=iters, replace=False))
    # invert the row-major upper-triangle enumeration k -> (i, j)
    i = n - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * n * (n - 1) - 7.0) / 2.0 - 0.5).astype(np.int64)
    row_start = i * (2 * n - i - 1) // 2
    j = k - row_start + i + 1
    return i, j


def ransac_line(points: np.ndarray, iters: int = 500, inlier_tol: float = 2.0, seed: int = 0,
                chunk: int = 256) -> tuple[float, float, np.ndarray]:
    """Robust line r = coef * q + intercept through (q, r) points.

    Hypotheses are lines through two points with distinct q. When there are
    no more point pairs than ``iters`` every pair is tried, otherwise
    ``iters`` distinct pairs are drawn. The winner maximises the inlier count
    (perpendicular distance <= ``inlier_tol``), ties going to the smaller mean
    inlier residual; the returned line is the orthogonal least-squares refit
    on its inliers.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 2:
        raise RansacError("need at least two points")
    q, r = pts[:, 0], pts[:, 1]
    if np.unique(q).size < 2:
        raise RansacError("vertical relation: all points share one q")
    rng = np.random.default_rng(seed)
    ii, jj = _pair_indices(len(pts), iters, rng)
    valid = q[ii] != q[jj]
    ii, jj = ii[valid], jj[valid]

    best = (-1, np.inf)
    best_mask = None
    for start in range(0, len(ii), chunk):
        a, b = ii[start:start + chunk], jj[start:start + chunk]
        coef = (r[b] - r[a]) / (q[b] - q[a])
        icpt = r[a] - coef * q[a]
        res = _perp_residuals(q[None, :], r[None, :], coef[:, None], icpt[:, None])
        mask = res <= inlier_tol
        counts = mask.sum(axis=1)
        mean_res = np.where(mask, res, 0.0).sum(axis=1) / np.maximum(counts, 1)
        # lexicographic: most inliers, then smallest mean residual, then first drawn
        k = np.lexsort((np.arange(len(counts)), mean_res, -counts))[0]
        if counts[k] > best[0] or (counts[k] == best[0] and mean_res[k] < best[1]):
            best = (int(counts[k]), float(mean_res[k]))
            best_mask = mask[k].copy()

    coef, intercept = orthogonal_fit(q[best_mask], r[best_mask])
    return coef, intercept, best_mask


def orthogonal_fit(q: np.ndarray, r: np.ndarray) -> tuple[float, float]:
    """Total-least-squares line: minimises the summed squared perpendicular distance.

    Returns ``inf`` slope for a vertical best fit.
    """
    qm, rm = q.mean(), r.mean()
    dq, dr = q - qm, r - rm
    sqq, srr, sqr = np.dot(dq, dq), np.dot(dr, dr), np.dot(dq, dr)
    theta = 0.5 * np.arctan2(2.0 * sqr, sqq - srr)
    c, s = np.cos(theta), np.sin(theta)
    if abs(c) < 1e-15:
        return float("inf"), float("nan")
    coef = float(s / c)
    return coef, float(rm - coef * qm)


def candidate_score(inlier_scores, coef: float, alpha: float) -> float:
    """Mean inlier score minus ``alpha`` std (population) minus a speed-ratio penalty.

    The penalty is ``|max(coef, 1/coef) - 1| / 10`` and is symmetric in
    ``coef`` and ``1/coef``.
    """
    scores = np.asarray(inlier_scores, dtype=np.float64)
    if scores.size < 1:
        raise ValueError("need at least one inlier score")
    if not coef > 0:
        raise ValueError(f"coef must be positive, got {coef}")
    c = max(1.0 / coef, coef)
    return float(scores.mean() - alpha * scores.std() - abs(c - 1.0) / 10.0)


def component_to_segment(inliers: np.ndarray, source_shape: tuple[int, int] | None = None,
                         query_id: str = "", ref_id: str = "", score: float = 0.0) -> SegmentPrediction:
    """Bounding box of inlier cells: ``[min, max + 1)`` on each axis, in seconds.

    Canvas cells are seconds (head-anchored); ``source_shape`` clips boxes to
    the real, pre-padding extent.
    """
    pts = np.asarray(inliers, dtype=np.float64)
    q0, q1 = pts[:, 0].min(), pts[:, 0].max() + 1.0
    r0, r1 = pts[:, 1].min(), pts[:, 1].max() + 1.0
    if source_shape is not None:
        q1 = min(q1, float(source_shape[0]))
        r1 = min(r1, float(source_shape[1]))
    return SegmentPrediction(query_id, ref_id, q0, q1, r0, r1, score)


def match_pair(m: ScoreMatrix, params: PostprocessParams | None = None) -> list[MatchCandidate]:
    p = params or PostprocessParams()
    values = m.values
    if m.orig_shape is not None:
        # padding cells carry no content; keep them out of the components
        kq, kr = min(m.orig_shape[0], m.shape[0]), min(m.orig_shape[1], m.shape[1])
        values = values[:kq, :kr]
    pts = threshold_points(values, p.t)
    out = []
    for comp in connected_components(pts, 8, p.min_component):
        if len(comp) < p.min_inliers or np.unique(comp[:, 0]).size < 2:
            continue
        coef, intercept, mask = ransac_line(comp, p.ransac_iters, p.inlier_tol, p.seed)
        if mask.sum() < p.min_inliers or not np.isfinite(coef) or coef <= 0:
            continue
        inl = comp[mask]
        s = candidate_score(inl[:, 2], coef, p.alpha)
        if s <= 0:
            continue
        seg = component_to_segment(inl, m.source_shape, m.query_id, m.ref_id, s)
        out.append(MatchCandidate(comp, coef, intercept, mask, s, seg))
    return out


def box_overlap(a: SegmentPrediction, b: SegmentPrediction) -> float:
    iq = max(0.0, min(a.q_end, b.q_end) - max(a.q_start, b.q_start))
    ir = max(0.0, min(a.r_end, b.r_end) - max(a.r_start, b.r_start))
    inter = iq * ir
    union = (a.q_end - a.q_start) * (a.r_end - a.r_start) + (b.q_end - b.q_start) * (b.r_end - b.r_start) - inter
    return inter / union if union > 0 else 0.0


def merge_predictions(groups: list[list[SegmentPrediction]], iou: float = 0.7) -> list[SegmentPrediction]:
    """Merge predictions from different settings whose boxes overlap by ``iou``.

    Each merged cluster becomes one box (the union extent) scored with the
    mean of its members. Predictions from the same setting are never merged
    with each other directly.
    """
    flat = [(g, p) for g, preds in enumerate(groups) for p in preds]
    n = len(flat)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        gi, pi = flat[i]
        for j in range(i + 1, n):
            gj, pj = flat[j]
            if gi != gj and pi.pair == pj.pair and box_overlap(pi, pj) >= iou:
                parent[find(j)] = find(i)

    clusters: dict[int, list[SegmentPrediction]] = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(flat[i][1])
    out = []
    for root in sorted(clusters):
        members = clusters[root]
        if len(members) == 1:
            out.append(members[0])
            continue
        first = members[0]
        out.append(replace(
            first,
            q_start=min(p.q_start for p in members), q_end=max(p.q_end for p in members),
            r_start=min(p.r_start for p in members), r_end=max(p.r_end for p in members),
            score=float(np.mean([p.score for p in members])),
        ))
    return out


def ensemble_match(m: ScoreMatrix, param_list=ENSEMBLE_PARAMS, base: PostprocessParams | None = None,
                   iou: float = 0.7) -> list[SegmentPrediction]:
    """Run :func:`match_pair` per (t, alpha) setting and merge agreeing boxes."""
    settings = list(param_list)
    if not settings:
        raise ValueError("need at least one (t, alpha) setting")
    base = base or PostprocessParams()
    groups = []
    for t, alpha in settings:
        cands = match_pair(m, replace(base, t=float(t), alpha=float(alpha)))
        groups.append([c.segment for c in cands])
    if len(groups) == 1:
        return groups[0]
    return merge_predictions(groups, iou)


def parse_params(text: str) -> list[tuple[float, float]]:
    """Parse ``"t:alpha[,t:alpha...]"``."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        t, _, alpha = item.partition(":")
        if not alpha:
            raise ValueError(f"bad parameter pair {item!r}; expected t:alpha")
        out.append((float(t), float(alpha)))
    if not out:
        raise ValueError("no parameter pairs given")
    return out
