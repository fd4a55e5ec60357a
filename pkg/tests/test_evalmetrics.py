import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simalign.core import GroundTruthSegment, SegmentPrediction
from simalign.evalmetrics import PairMismatchError, box_iou, eval_report, micro_ap, rank_predictions


def gt(q0, q1, r0, r1, pair=("Q", "R")):
    return GroundTruthSegment(*pair, q0, q1, r0, r1)


def pred(q0, q1, r0, r1, score, pair=("Q", "R")):
    return SegmentPrediction(*pair, q0, q1, r0, r1, score)


def test_box_iou_partial_overlap():
    # 5x5 intersection of two 10x10 boxes: 25 / 175
    assert box_iou(gt(0, 10, 0, 10), gt(5, 15, 5, 15)) == pytest.approx(25 / 175)


def test_box_iou_needs_same_pair():
    with pytest.raises(PairMismatchError):
        box_iou(gt(0, 1, 0, 1), gt(0, 1, 0, 1, ("Q", "X")))


def test_fp_before_tp():
    gts = [gt(0, 10, 0, 10)]
    preds = [pred(50, 60, 50, 60, 0.9), pred(0, 10, 0, 10, 0.8)]
    assert micro_ap(preds, gts) == pytest.approx(0.5)


def test_perfect_predictions():
    gts = [gt(0, 10, 0, 10), gt(20, 30, 40, 50, ("Q2", "R"))]
    preds = [pred(g.q_start, g.q_end, g.r_start, g.r_end, s, g.pair) for g, s in zip(gts, (0.3, 7.0))]
    assert micro_ap(preds, gts) == 1.0


def test_empty_ground_truth_is_an_error():
    with pytest.raises(ValueError):
        micro_ap([pred(0, 1, 0, 1, 0.5)], [])


def test_no_predictions_scores_zero():
    assert micro_ap([], [gt(0, 1, 0, 1)]) == 0.0


def test_each_gt_matched_once():
    gts = [gt(0, 10, 0, 10)]
    preds = [pred(0, 10, 0, 10, 0.9), pred(0, 10, 0, 10, 0.8)]
    ranked = rank_predictions(preds, gts)
    assert [m.is_tp for m in ranked] == [True, False]
    assert micro_ap(preds, gts) == 1.0


def test_greedy_prefers_higher_iou_gt():
    gts = [gt(0, 10, 0, 10), gt(2, 12, 2, 12)]
    ranked = rank_predictions([pred(2, 12, 2, 11, 0.9)], gts)
    assert ranked[0].is_tp
    # the second GT box is the better match and gets consumed
    second = rank_predictions([pred(2, 12, 2, 11, 0.9), pred(0, 10, 0, 10, 0.8)], gts)
    assert [m.is_tp for m in second] == [True, True]


def test_iou_threshold_boundary():
    # IoU exactly 0.5 counts
    g = gt(0, 10, 0, 10)
    p = pred(0, 10, 0, 5, 1.0)
    assert box_iou(p, g) == 0.5
    assert micro_ap([p], [g]) == 1.0


def test_report_fields():
    rep = eval_report([pred(0, 10, 0, 10, 1.0)], [gt(0, 10, 0, 10)])
    assert rep == {"uAP": 1.0, "num_predictions": 1, "num_gt": 1}


@st.composite
def scenario(draw):
    n_gt = draw(st.integers(1, 6))
    gts = [gt(10 * i, 10 * i + 8, 0, 8, (f"Q{i % 3}", "R")) for i in range(n_gt)]
    preds = []
    for _ in range(draw(st.integers(0, 12))):
        i = draw(st.integers(0, n_gt - 1))
        shift = draw(st.sampled_from([0, 1, 3, 50]))
        g = gts[i]
        preds.append(pred(g.q_start + shift, g.q_end + shift, 0, 8, draw(st.integers(-50, 50)) / 10, g.pair))
    return preds, gts


@settings(max_examples=150, deadline=None)
@given(scenario())
def test_bounded(case):
    preds, gts = case
    assert 0.0 <= micro_ap(preds, gts) <= 1.0


@settings(max_examples=150, deadline=None)
@given(scenario())
def test_monotone_transform_invariance(case):
    preds, gts = case
    moved = [pred(p.q_start, p.q_end, p.r_start, p.r_end, np.exp(p.score) * 3 + 1, p.pair) for p in preds]
    assert micro_ap(moved, gts) == pytest.approx(micro_ap(preds, gts), abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(scenario())
def test_lowest_zero_iou_prediction_never_helps(case):
    preds, gts = case
    low = min([p.score for p in preds], default=0.0) - 1.0
    extra = pred(1000, 1001, 1000, 1001, low, gts[0].pair)
    assert micro_ap(preds + [extra], gts) <= micro_ap(preds, gts) + 1e-12


@settings(max_examples=150, deadline=None)
@given(scenario())
def test_one_iff_all_gt_before_first_fp(case):
    preds, gts = case
    ranked = rank_predictions(preds, gts)
    first_fp = next((k for k, m in enumerate(ranked) if not m.is_tp), len(ranked))
    all_found = sum(m.is_tp for m in ranked[:first_fp]) == len(gts)
    assert (micro_ap(preds, gts) == pytest.approx(1.0)) == all_found
