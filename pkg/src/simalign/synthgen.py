"""Synthetic corpora with known answers.

Two generators live here: frame-embedding sequences with planted copied
segments, and composite (stacked / letterboxed) frame rasters.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    EmbeddingSequence,
    GroundTruthSegment,
    ManifestEntry,
    atomic_write_text,
    save_embeddings,
    write_manifest,
    write_pairs_csv,
    write_segments_csv,
)
from .frameprep import FrameImage, SplitRegion

AR_RHO = 0.5
# Perturbation std per component is NOISE_SCALE * noise_level / sqrt(D), i.e. the
# expected noise norm is twice noise_level relative to a unit frame.
NOISE_SCALE = 2.0


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _ar1_frames(rng: np.random.Generator, t: int, d: int, rho: float) -> np.ndarray:
    frames = np.empty((t, d))
    frames[0] = _unit(rng.standard_normal(d))
    w = math.sqrt(1.0 - rho * rho)
    for i in range(1, t):
        g = rng.standard_normal(d) / math.sqrt(d)
        frames[i] = _unit(rho * frames[i - 1] + w * g)
    return frames


def gen_reference(t: int, d: int, seed: int, rho: float = AR_RHO, video_id: str = "ref", model_id: str = "synth") -> EmbeddingSequence:
    """Unit-norm AR(1) embedding sequence, deterministic in ``seed``."""
    if t < 1 or d < 2:
        raise ValueError("need T >= 1 and D >= 2")
    rng = np.random.default_rng(seed)
    return EmbeddingSequence(video_id, model_id, _ar1_frames(rng, t, d, rho))


def copied_ref_length(seg_len: int, speed: float) -> int:
    """Reference frames spanned by a copy of ``seg_len`` query seconds."""
    return int(math.floor((seg_len - 1) * speed)) + 1


def gen_copy_pair(
    ref: EmbeddingSequence,
    q_len: int,
    r_offset: int,
    seg_len: int,
    q_offset: int,
    speed: float,
    noise_level: float,
    seed: int,
    rho: float = AR_RHO,
    query_id: str = "query",
) -> tuple[EmbeddingSequence, GroundTruthSegment]:
    """Query whose frames ``q_offset .. q_offset+seg_len`` copy ``ref`` at ``speed``.

    Query frame ``q_offset + i`` is a noisy copy of reference frame
    ``r_offset + floor(i * speed)``; everything else is fresh AR(1) content.
    """
    if not 0.25 <= speed <= 4.0:
        raise ValueError(f"speed {speed} outside [1/4, 4]")
    if seg_len < 1 or q_offset < 0 or r_offset < 0 or q_offset + seg_len > q_len:
        raise ValueError("copied segment does not fit in the query")
    span = copied_ref_length(seg_len, speed)
    r_end = r_offset + seg_len * speed
    if r_offset + span > ref.num_frames or r_end > ref.num_frames:
        raise ValueError("copied segment does not fit in the reference")
    rng = np.random.default_rng(seed)
    d = ref.dim
    frames = _ar1_frames(rng, q_len, d, rho)
    src = r_offset + np.floor(np.arange(seg_len) * speed).astype(int)
    copied = ref.frames[src]
    if noise_level > 0:
        noise = rng.standard_normal(copied.shape) * (NOISE_SCALE * noise_level / math.sqrt(d))
        copied = _unit(copied + noise)
    frames[q_offset:q_offset + seg_len] = copied
    query = EmbeddingSequence(query_id, ref.model_id, frames)
    gt = GroundTruthSegment(query_id, ref.video_id, q_offset, q_offset + seg_len, r_offset, r_end)
    return query, gt


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------


@dataclass
class CorpusParams:
    dim: int = 256
    ref_len: tuple[int, int] = (60, 120)
    query_len: tuple[int, int] = (40, 120)
    seg_len: tuple[int, int] = (15, 40)
    speeds: tuple[float, ...] = (0.5, 1.0, 2.0)
    noise_level: float = 0.2
    rho: float = AR_RHO
    # extra embedding "models": random rotations of the base features plus noise
    n_models: int = 1
    model_noise: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusParams":
        d = dict(d)
        for key in ("ref_len", "query_len", "seg_len", "speeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Corpus:
    queries: dict[str, EmbeddingSequence]
    refs: dict[str, EmbeddingSequence]
    gt: list[GroundTruthSegment]
    # per extra model: {video_id: sequence}
    alt_models: dict[str, dict[str, EmbeddingSequence]] = field(default_factory=dict)

    def pairs(self) -> list[tuple[str, str]]:
        return [(q, r) for q in sorted(self.queries) for r in sorted(self.refs)]

    def positive_pairs(self) -> set[tuple[str, str]]:
        return {g.pair for g in self.gt}


def _video_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def build_corpus(n_refs: int, n_queries: int, positive_fraction: float, params: CorpusParams | None = None, seed: int = 0) -> Corpus:
    """In-memory corpus; ``round(n_queries * positive_fraction)`` queries copy one reference each."""
    if n_refs < 1 or n_queries < 1:
        raise ValueError("counts must be >= 1")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must lie in [0, 1]")
    p = params or CorpusParams()
    refs = {}
    for i in range(n_refs):
        rng = _video_rng(seed, i)
        t = int(rng.integers(p.ref_len[0], p.ref_len[1] + 1))
        vid = f"R{i:05d}"
        refs[vid] = EmbeddingSequence(vid, "m0", _ar1_frames(rng, t, p.dim, p.rho))

    n_pos = int(round(n_queries * positive_fraction))
    queries, gt = {}, []
    ref_ids = sorted(refs)
    for j in range(n_queries):
        rng = _video_rng(seed, 1_000_000 + j)
        vid = f"Q{j:05d}"
        if j < n_pos:
            ref = refs[ref_ids[int(rng.integers(len(ref_ids)))]]
            speed = float(p.speeds[int(rng.integers(len(p.speeds)))])
            seg_len = int(rng.integers(p.seg_len[0], p.seg_len[1] + 1))
            # shrink the segment until it fits in the reference
            while seg_len > 2 and math.ceil(seg_len * speed) > ref.num_frames:
                seg_len -= 1
            q_len = int(rng.integers(max(p.query_len[0], seg_len), max(p.query_len[1], seg_len) + 1))
            r_room = ref.num_frames - math.ceil(seg_len * speed)
            r_off = int(rng.integers(0, r_room + 1))
            q_off = int(rng.integers(0, q_len - seg_len + 1))
            q, g = gen_copy_pair(ref, q_len, r_off, seg_len, q_off, speed, p.noise_level,
                                 int(rng.integers(2**31)), p.rho, vid)
            queries[vid] = EmbeddingSequence(vid, "m0", q.frames)
            gt.append(g)
        else:
            t = int(rng.integers(p.query_len[0], p.query_len[1] + 1))
            queries[vid] = EmbeddingSequence(vid, "m0", _ar1_frames(rng, t, p.dim, p.rho))

    alt = {}
    for m in range(1, p.n_models):
        rng = np.random.default_rng([seed, 2_000_000 + m])
        rot, _ = np.linalg.qr(rng.standard_normal((p.dim, p.dim)))
        videos = {}
        for vid, seq in sorted({**refs, **queries}.items()):
            noise = rng.standard_normal(seq.frames.shape) * (p.model_noise / math.sqrt(p.dim))
            videos[vid] = EmbeddingSequence(vid, f"m{m}", _unit(seq.frames @ rot + noise))
        alt[f"m{m}"] = videos
    return Corpus(queries, refs, gt, alt)


def gen_corpus(n_refs: int, n_queries: int, positive_fraction: float, params: CorpusParams | None, seed: int, out_dir) -> Path:
    """Write a corpus to ``out_dir``; returns the manifest path.

    Layout: ``corpus.json`` manifest, ``emb/<model>/<video>.same``, ``gt.csv``,
    ``pairs.csv`` (full cross product) and ``params.json``.
    """
    p = params or CorpusParams()
    corpus = build_corpus(n_refs, n_queries, positive_fraction, p, seed)
    out = Path(out_dir)
    entries = []
    models = {"m0": {**corpus.refs, **corpus.queries}, **corpus.alt_models}
    for model, videos in models.items():
        (out / "emb" / model).mkdir(parents=True, exist_ok=True)
        for vid in sorted(videos):
            rel = f"emb/{model}/{vid}.same"
            save_embeddings(videos[vid], out / rel)
            role = "reference" if vid in corpus.refs else "query"
            entries.append(ManifestEntry(vid, model, rel, videos[vid].num_frames, role))
    manifest = out / "corpus.json"
    write_manifest(entries, manifest)
    write_segments_csv(corpus.gt, out / "gt.csv", with_score=False)
    write_pairs_csv(corpus.pairs(), out / "pairs.csv")
    meta = {"n_refs": n_refs, "n_queries": n_queries, "positive_fraction": positive_fraction,
            "seed": seed, "params": asdict(p)}
    atomic_write_text(out / "params.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# composite frames
# ---------------------------------------------------------------------------


def grid_layout(width: int, height: int, rows: int, cols: int, border_px: int) -> list[SplitRegion]:
    """Tiles of a ``rows`` x ``cols`` grid separated and surrounded by ``border_px`` gutters."""
    xs = np.linspace(border_px, width, cols + 1)
    ys = np.linspace(border_px, height, rows + 1)
    tiles = []
    for i in range(rows):
        for j in range(cols):
            x0, x1 = int(round(xs[j])), int(round(xs[j + 1])) - border_px
            y0, y1 = int(round(ys[i])), int(round(ys[i + 1])) - border_px
            tiles.append(SplitRegion(x0, y0, x1, y1))
    return tiles


def _check_layout(layout: list[SplitRegion], width: int, height: int) -> None:
    for t in layout:
        if not (0 <= t.x0 < t.x1 <= width and 0 <= t.y0 < t.y1 <= height):
            raise ValueError(f"tile {t} outside {width}x{height} frame")
    for i, a in enumerate(layout):
        for b in layout[i + 1:]:
            if a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1:
                raise ValueError(f"overlapping tiles {a} and {b}")


def _tile_levels(layout: list[SplitRegion], border_value: float, rng: np.random.Generator,
                 min_gap: float = 50.0) -> list[float]:
    """Mean brightness per tile, distinct from touching neighbours and the border."""
    def touching(a, b):
        ox = min(a.x1, b.x1) - max(a.x0, b.x0)
        oy = min(a.y1, b.y1) - max(a.y0, b.y0)
        return (ox > 0 and -1 <= oy <= 0) or (oy > 0 and -1 <= ox <= 0)

    for _ in range(1000):
        levels = rng.uniform(70.0, 200.0, size=len(layout))
        ok = all(abs(lv - border_value) >= min_gap for lv in levels)
        for i, a in enumerate(layout):
            for j in range(i + 1, len(layout)):
                if touching(a, layout[j]) and abs(levels[i] - levels[j]) < min_gap:
                    ok = False
        if ok:
            return [float(v) for v in levels]
    raise RuntimeError("could not assign tile levels")


def gen_composite_frames(layout: list[SplitRegion], border_px: int, n_frames: int, seed: int,
                         size: tuple[int, int] | None = None, border_value: float = 0.0,
                         noise_std: float = 15.0) -> tuple[list[FrameImage], list[SplitRegion]]:
    """Stacked-scene video: each tile is independent noise video, the rest a constant border.

    ``size`` is (width, height); by default the tight box around the tiles
    extended by ``border_px``.
    """
    if not layout:
        raise ValueError("layout must contain at least one tile")
    if size is None:
        size = (max(t.x1 for t in layout) + border_px, max(t.y1 for t in layout) + border_px)
    width, height = size
    _check_layout(layout, width, height)
    rng = np.random.default_rng(seed)
    levels = _tile_levels(layout, border_value, rng)
    frames = []
    for _ in range(n_frames):
        px = np.full((height, width), border_value, dtype=np.float64)
        for tile, level in zip(layout, levels):
            h, w = tile.y1 - tile.y0, tile.x1 - tile.x0
            content = level + noise_std * rng.standard_normal((h, w))
            px[tile.y0:tile.y1, tile.x0:tile.x1] = np.clip(content, 0.0, 255.0)
        frames.append(FrameImage(px))
    return frames, list(layout)
