"""Micro-averaged precision over copy-segment predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import GroundTruthSegment, SegmentPrediction


class PairMismatchError(ValueError):
    pass


def box_iou(a: GroundTruthSegment, b: GroundTruthSegment) -> float:
    """IoU of the (query interval x reference interval) rectangles."""
    if a.pair != b.pair:
        raise PairMismatchError(f"segments belong to different pairs: {a.pair} vs {b.pair}")
    iq = max(0.0, min(a.q_end, b.q_end) - max(a.q_start, b.q_start))
    ir = max(0.0, min(a.r_end, b.r_end) - max(a.r_start, b.r_start))
    inter = iq * ir
    area_a = (a.q_end - a.q_start) * (a.r_end - a.r_start)
    area_b = (b.q_end - b.q_start) * (b.r_end - b.r_start)
    return inter / (area_a + area_b - inter)


@dataclass
class RankedMatch:
    prediction: SegmentPrediction
    is_tp: bool
    precision: float
    recall: float


def rank_predictions(preds: Sequence[SegmentPrediction], gts: Sequence[GroundTruthSegment],
                     iou_thresh: float = 0.5) -> list[RankedMatch]:
    """Greedy matching in descending score order (ties keep input order)."""
    if not gts:
        raise ValueError("ground truth is empty")
    scores = np.array([p.score for p in preds], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("prediction scores must be finite")
    order = np.argsort(-scores, kind="stable")
    by_pair: dict[tuple[str, str], list[int]] = {}
    for i, g in enumerate(gts):
        by_pair.setdefault(g.pair, []).append(i)
    matched = np.zeros(len(gts), dtype=bool)
    out, tp = [], 0
    for rank, idx in enumerate(order, start=1):
        p = preds[idx]
        best, best_iou = -1, iou_thresh
        for gi in by_pair.get(p.pair, ()):
            if matched[gi]:
                continue
            iou = box_iou(p, gts[gi])
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = gi, iou
        hit = best >= 0
        if hit:
            matched[best] = True
            tp += 1
        out.append(RankedMatch(p, hit, tp / rank, tp / len(gts)))
    return out


def micro_ap(preds: Sequence[SegmentPrediction], gts: Sequence[GroundTruthSegment], iou_thresh: float = 0.5) -> float:
    """Sum of precision at every true positive, divided by the number of GT segments."""
    ranked = rank_predictions(preds, gts, iou_thresh)
    return float(sum(m.precision for m in ranked if m.is_tp) / len(gts))


def eval_report(preds, gts, iou_thresh: float = 0.5) -> dict:
    return {"uAP": micro_ap(preds, gts, iou_thresh), "num_predictions": len(preds), "num_gt": len(gts)}
