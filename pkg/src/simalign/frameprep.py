"""Stacked-scene and border detection on video frames.

Edges are averaged over many frames (so that only persistent layout edges
survive) and combined with the per-pixel temporal standard deviation (static
borders have almost none). A region is alternately trimmed of low-variance
borders and split along full-span lines until nothing changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
# |gy| <= |gx| * tan(22.5 deg) is treated as a horizontal gradient
TAN_22_5 = math.tan(math.radians(22.5))


@dataclass(frozen=True, eq=False)
class FrameImage:
    pixels: np.ndarray  # H x W grayscale in [0, 255]

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim == 3 and px.shape[2] in (3, 4):
            px = px[..., :3] @ LUMA
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"frame must be H x W (or H x W x 3), got {np.shape(self.pixels)}")
        if px.min() < 0.0 or px.max() > 255.0:
            raise ValueError("pixel values must lie in [0, 255]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, order=True)
class SplitRegion:
    """Half-open pixel rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"empty region {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"negative region bounds {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def contains(self, other: "SplitRegion") -> bool:
        return self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1


@dataclass
class PrepParams:
    sigma: float = 1.4
    low: float = 20.0
    high: float = 60.0
    edge_thresh: float = 0.5
    span_frac: float = 0.85
    std_thresh: float = 4.0
    min_side: int = 32
    max_frames: int = 32
    border_exclude: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "PrepParams":
        return cls(**d)


@dataclass(frozen=True)
class SplitLine:
    axis: str  # "x": vertical line at column `pos`; "y": horizontal line at row `pos`
    pos: int


# ---------------------------------------------------------------------------
# Canny
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, FrameImage) else np.asarray(img, dtype=np.float64)


def sobel_gradients(smoothed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel derivatives (gx along columns, gy along rows), replicate border."""
    p = np.pad(smoothed, 1, mode="edge")
    diff_x = p[:, 2:] - p[:, :-2]
    gx = diff_x[:-2] + 2.0 * diff_x[1:-1] + diff_x[2:]
    diff_y = p[2:, :] - p[:-2, :]
    gy = diff_y[:, :-2] + 2.0 * diff_y[:, 1:-1] + diff_y[:, 2:]
    return gx, gy


def non_max_suppression(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Gradient magnitude kept only at local maxima across the edge direction.

    Horizontal/vertical plateaus keep the lower-index pixel (strict against
    the previous neighbour, non-strict against the next) so a symmetric step
    yields a one-pixel line. Diagonals compare non-strictly on both sides,
    which keeps the operator exactly transpose-symmetric.
    """
    mag = np.hypot(gx, gy)
    ax, ay = np.abs(gx), np.abs(gy)
    horiz = ay <= ax * TAN_22_5
    vert = ~horiz & (ax <= ay * TAN_22_5)
    diag = ~horiz & ~vert
    main_diag = diag & (gx * gy > 0)
    anti_diag = diag & ~main_diag

    p = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    def nb(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    # magnitudes equal in exact arithmetic can differ in the last bits; treat them as ties
    tol = 1e-9 * float(mag.max(initial=0.0))

    def above(a):
        return mag > a + tol

    def at_least(a):
        return mag >= a - tol

    keep = np.zeros_like(mag, dtype=bool)
    keep |= horiz & above(nb(0, -1)) & at_least(nb(0, 1))
    keep |= vert & above(nb(-1, 0)) & at_least(nb(1, 0))
    keep |= main_diag & at_least(nb(-1, -1)) & at_least(nb(1, 1))
    keep |= anti_diag & at_least(nb(-1, 1)) & at_least(nb(1, -1))
    return np.where(keep, mag, 0.0)


def hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = nms >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(nms.shape, dtype=np.uint8)
    strong_labels = np.unique(labels[nms >= high])
    strong_labels = strong_labels[strong_labels > 0]
    return np.isin(labels, strong_labels).astype(np.uint8)


def canny(img, sigma: float = 1.4, low: float = 20.0, high: float = 60.0) -> np.ndarray:
    """Binary Canny edge map (uint8 0/1) of a grayscale frame."""
    if not 0 < low < high:
        raise ValueError("need 0 < low < high")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    px = _pixels(img)
    kernel = gaussian_kernel(sigma)
    if min(px.shape) < kernel.size:
        raise ValueError(f"image {px.shape} is smaller than the {kernel.size}-tap blur kernel")
    # subtracting the minimum makes the result exactly invariant to brightness offsets
    px = px - px.min()
    smoothed = ndimage.convolve1d(px, kernel, axis=0, mode="nearest")
    smoothed = ndimage.convolve1d(smoothed, kernel, axis=1, mode="nearest")
    gx, gy = sobel_gradients(smoothed)
    return hysteresis(non_max_suppression(gx, gy), low, high)


def _stack(frames) -> np.ndarray:
    arrays = [_pixels(f) for f in frames]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"frames have mixed dimensions: {sorted(shapes)}")
    return np.stack(arrays)


def average_edge_map(frames, sigma: float = 1.4, low: float = 20.0, high: float = 60.0) -> np.ndarray:
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    stack = _stack(frames)
    return np.mean([canny(f, sigma, low, high) for f in stack], axis=0)


def stddev_map(frames) -> np.ndarray:
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    return _stack(frames).std(axis=0)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) index runs of consecutive True values."""
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate(([idx[0]], idx[breaks + 1]))
    ends = np.concatenate((idx[breaks], [idx[-1]]))
    return list(zip(starts.tolist(), ends.tolist()))


def _edge_support(edge: np.ndarray) -> np.ndarray:
    """Edge rate of each pixel pooled with its two neighbours across the line.

    On a noisy step the NMS maximum jitters between the two plateau columns
    from frame to frame; summing over +-1 px recovers the persistent edge.
    """
    p = np.pad(edge, ((0, 0), (1, 1)))
    return np.minimum(1.0, p[:, :-2] + p[:, 1:-1] + p[:, 2:])


def _axis_lines(edge: np.ndarray, std: np.ndarray, edge_thresh, span_frac, std_thresh, exclude) -> list[int]:
    """Split positions along the last axis of ``edge``/``std`` (already cropped)."""
    n = edge.shape[1]
    edge_hit = (_edge_support(edge) >= edge_thresh).mean(axis=0) >= span_frac

    low_col = (std < std_thresh).all(axis=0)
    high_col = (std >= std_thresh).any(axis=0)
    left_high = np.cumsum(high_col) > 0
    right_high = np.cumsum(high_col[::-1])[::-1] > 0
    before = np.concatenate(([False], left_high[:-1]))
    after = np.concatenate((right_high[1:], [False]))
    std_hit = low_col & before & after

    pos = np.arange(n)
    inside = (pos >= exclude) & (pos <= n - 1 - exclude)
    # either criterion qualifies a line; a gutter's two edges and its flat middle form one run
    return [int(round((a + b) / 2.0)) for a, b in _runs((edge_hit | std_hit) & inside)]


def find_split_lines(edge_avg: np.ndarray, std_map: np.ndarray, region: SplitRegion,
                     edge_thresh: float = 0.5, span_frac: float = 0.85, std_thresh: float = 4.0,
                     border_exclude: int = 4) -> list[SplitLine]:
    """Full-span edge lines and low-variance separators inside ``region``.

    Coordinates are absolute. Lines closer than ``border_exclude`` pixels to
    the region border are ignored; runs of adjacent qualifying lines collapse
    to their centroid.
    """
    h, w = edge_avg.shape
    if std_map.shape != (h, w):
        raise ValueError("edge and std maps differ in shape")
    if region.x1 > w or region.y1 > h:
        raise ValueError(f"region {region} exceeds {w}x{h} map")
    e = edge_avg[region.y0:region.y1, region.x0:region.x1]
    s = std_map[region.y0:region.y1, region.x0:region.x1]
    args = (edge_thresh, span_frac, std_thresh, border_exclude)
    xs = _axis_lines(e, s, *args)
    ys = _axis_lines(e.T, s.T, *args)
    return [SplitLine("x", region.x0 + x) for x in xs] + [SplitLine("y", region.y0 + y) for y in ys]


def erase_edges(std_map: np.ndarray, region: SplitRegion, std_thresh: float = 4.0) -> SplitRegion:
    """Peel border rows/columns whose mean temporal std is below ``std_thresh``.

    Never shrinks a side below one pixel; a fully static region collapses to a
    sliver that the caller's minimum-size rule discards.
    """
    x0, y0, x1, y1 = region.x0, region.y0, region.x1, region.y1
    changed = True
    while changed:
        changed = False
        if y1 - y0 > 1 and std_map[y0, x0:x1].mean() < std_thresh:
            y0 += 1
            changed = True
        if y1 - y0 > 1 and std_map[y1 - 1, x0:x1].mean() < std_thresh:
            y1 -= 1
            changed = True
        if x1 - x0 > 1 and std_map[y0:y1, x0].mean() < std_thresh:
            x0 += 1
            changed = True
        if x1 - x0 > 1 and std_map[y0:y1, x1 - 1].mean() < std_thresh:
            x1 -= 1
            changed = True
    return SplitRegion(x0, y0, x1, y1)


def cut_region(region: SplitRegion, lines: list[SplitLine]) -> list[SplitRegion]:
    """Partition ``region`` into the grid cells between lines.

    The line pixel itself starts the next cell.
    """
    xs = sorted({ln.pos for ln in lines if ln.axis == "x" and region.x0 < ln.pos < region.x1})
    ys = sorted({ln.pos for ln in lines if ln.axis == "y" and region.y0 < ln.pos < region.y1})
    xb = [region.x0] + xs + [region.x1]
    yb = [region.y0] + ys + [region.y1]
    return [SplitRegion(xb[i], yb[j], xb[i + 1], yb[j + 1])
            for j in range(len(yb) - 1) for i in range(len(xb) - 1)]


def max_split_depth(width: int, height: int, min_side: int = 32) -> int:
    return int(math.floor(math.log2(max(max(width, height) / min_side, 1.0)))) + 1


@dataclass
class SplitTrace:
    regions: list[SplitRegion] = field(default_factory=list)
    max_depth: int = 0


def split_maps(edge_avg: np.ndarray, std_map: np.ndarray, params: PrepParams | None = None) -> SplitTrace:
    """Recursive erase/split on precomputed feature maps."""
    p = params or PrepParams()
    h, w = std_map.shape
    depth_cap = max_split_depth(w, h, p.min_side)
    trace = SplitTrace()

    def small(r: SplitRegion) -> bool:
        return min(r.width, r.height) < p.min_side

    def visit(region: SplitRegion, depth: int) -> None:
        trace.max_depth = max(trace.max_depth, depth)
        if small(region):
            return
        trimmed = erase_edges(std_map, region, p.std_thresh)
        if small(trimmed):
            return
        if depth >= depth_cap:
            trace.regions.append(trimmed)
            return
        lines = find_split_lines(edge_avg, std_map, trimmed, p.edge_thresh, p.span_frac,
                                 p.std_thresh, p.border_exclude)
        parts = cut_region(trimmed, lines)
        if len(parts) <= 1:
            trace.regions.append(trimmed)
            return
        for part in parts:
            visit(part, depth + 1)

    visit(SplitRegion(0, 0, w, h), 0)
    if not trace.regions:
        trace.regions.append(SplitRegion(0, 0, w, h))
    return trace


def sample_frames(frames, max_frames: int = 32) -> list:
    n = len(frames)
    if n <= max_frames:
        return list(frames)
    idx = np.unique(np.linspace(0, n - 1, max_frames).round().astype(int))
    return [frames[i] for i in idx]


def feature_maps(frames, params: PrepParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    p = params or PrepParams()
    picked = sample_frames(frames, p.max_frames)
    return average_edge_map(picked, p.sigma, p.low, p.high), stddev_map(picked)


def split_recursive(frames, params: PrepParams | None = None) -> list[SplitRegion]:
    """Scene rectangles of a (possibly stacked / letterboxed) video.

    Layout is assumed constant over the video; up to ``max_frames`` frames are
    sampled uniformly for the feature maps.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    edge, std = feature_maps(frames, params)
    return split_maps(edge, std, params).regions
