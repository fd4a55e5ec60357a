"""Stage composition shared by the CLI and the experiment harness."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import EmbeddingSequence, GroundTruthSegment, ScoreMatrix, SegmentPrediction, SimilarityMatrix
from .postprocess import ENSEMBLE_PARAMS, PostprocessParams, ensemble_match
from .samscore import ConvScorer, heatmap_target, score_pair
from .simgen import CANVAS_SIZE, cosine_similarity_matrix, ensemble_similarity, fit_to_canvas


def pair_similarity(queries: Mapping[str, Sequence[EmbeddingSequence]], refs: Mapping[str, Sequence[EmbeddingSequence]],
                    query_id: str, ref_id: str) -> SimilarityMatrix:
    """Similarity of one pair, averaged over every embedding model both videos share."""
    qs = {s.model_id: s for s in queries[query_id]}
    rs = {s.model_id: s for s in refs[ref_id]}
    models = sorted(set(qs) & set(rs))
    if not models:
        raise ValueError(f"{query_id} and {ref_id} share no embedding model")
    return ensemble_similarity([cosine_similarity_matrix(qs[m], rs[m]) for m in models])


def predict_pair(sim: SimilarityMatrix, scorer: str = "identity", param_list=ENSEMBLE_PARAMS,
                 model: ConvScorer | None = None, base: PostprocessParams | None = None,
                 canvas: int = CANVAS_SIZE) -> list[SegmentPrediction]:
    """Canvas fit -> score matrix -> ensembled post-processing for one pair."""
    fitted = fit_to_canvas(sim, canvas)
    scores = score_pair(fitted, scorer, model)
    return ensemble_match(scores, param_list, base)


def _predict_job(args):
    sim, scorer, param_list, model, base, canvas = args
    return predict_pair(sim, scorer, param_list, model, base, canvas)


def predict_many(sims: Iterable[SimilarityMatrix], scorer: str = "identity", param_list=ENSEMBLE_PARAMS,
                 model: ConvScorer | None = None, base: PostprocessParams | None = None,
                 canvas: int = CANVAS_SIZE, workers: int = 1) -> list[SegmentPrediction]:
    """Predictions for many pairs, in sorted (query_id, ref_id) order regardless of ``workers``."""
    sims = sorted(sims, key=lambda m: m.pair)
    jobs = [(s, scorer, tuple(param_list), model, base, canvas) for s in sims]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_predict_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_predict_job(j) for j in jobs]
    return [p for preds in results for p in preds]


def training_pairs(sims: Iterable[SimilarityMatrix], gts: Sequence[GroundTruthSegment], sigma: float = 1.5,
                   canvas: int = CANVAS_SIZE) -> list[tuple[SimilarityMatrix, ScoreMatrix]]:
    """(canvas input, heatmap target) samples; pairs without annotations get an all-zero target."""
    by_pair: dict[tuple[str, str], list[GroundTruthSegment]] = {}
    for g in gts:
        by_pair.setdefault(g.pair, []).append(g)
    out = []
    for s in sims:
        fitted = fit_to_canvas(s, canvas)
        target = heatmap_target(by_pair.get(s.pair, []), fitted.shape, sigma, s.query_id, s.ref_id)
        out.append((fitted, replace(target, orig_shape=fitted.orig_shape)))
    return out
