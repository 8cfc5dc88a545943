import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrvg.evalkit import (
    GROUNDING_TAUS,
    EvalDetection,
    EvalError,
    EvalTruth,
    acc_at,
    average_precision,
    evaluate_grounding,
    iou,
    macc,
)
from mrvg.refdb import BoundingBox

from conftest import iou_pixel_oracle as _iou_pixel_oracle


def _box(x, y, w, h):
    return BoundingBox(x, y, w, h)


def test_iou_identical_boxes():
    assert iou(_box(3, 4, 10, 12), _box(3, 4, 10, 12)) == 1.0


def test_iou_disjoint_boxes():
    assert iou(_box(0, 0, 5, 5), _box(10, 10, 5, 5)) == 0.0


def test_iou_hand_value():
    assert iou(_box(0, 0, 10, 10), _box(5, 5, 10, 10)) == pytest.approx(25 / 175, abs=0)
    assert iou(_box(0, 0, 10, 10), _box(5, 5, 10, 10)) == _iou_pixel_oracle(
        _box(0, 0, 10, 10), _box(5, 5, 10, 10)
    )


def test_iou_symmetry():
    a, b = _box(0, 0, 7, 3), _box(2, 1, 9, 9)
    assert iou(a, b) == iou(b, a)


def test_iou_matches_pixel_oracle_exactly():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        a = _box(int(rng.integers(0, 30)), int(rng.integers(0, 30)),
                 int(rng.integers(1, 51)), int(rng.integers(1, 51)))
        b = _box(int(rng.integers(0, 30)), int(rng.integers(0, 30)),
                 int(rng.integers(1, 51)), int(rng.integers(1, 51)))
        assert iou(a, b) == _iou_pixel_oracle(a, b)


def _pairs_from_ious(ious):
    """Prediction pairs engineered to have exactly the given IoU values."""
    pairs = []
    for value in ious:
        gt = _box(0, 0, 100, 100)
        if value == 0.0:
            pairs.append((None, gt))
        else:
            # overlap w x 100 of a width-100 box: iou = w / (200 - w)
            w = round(200 * value / (1 + value))
            pairs.append((_box(100 - w, 0, 100, 100), gt))
    return pairs


def test_acc_at_hand_count():
    pairs = _pairs_from_ious([0.6, 0.4, 0.95])
    assert acc_at(pairs, 0.5) == pytest.approx(2 / 3)


def test_acc_at_perfect():
    pairs = [(_box(0, 0, 10, 10), _box(0, 0, 10, 10))] * 4
    assert acc_at(pairs, 0.9) == 1.0


def test_acc_at_exact_threshold_is_incorrect():
    # iou((0,0,10,10),(0,0,10,5)) = 50/100 = 0.5 exactly
    pairs = [(_box(0, 0, 10, 10), _box(0, 0, 10, 5))]
    assert acc_at(pairs, 0.5) == 0.0
    assert acc_at(pairs, 0.5, strict=False) == 1.0


def test_acc_at_rejects_bad_tau():
    with pytest.raises(EvalError):
        acc_at([(None, _box(0, 0, 1, 1))], 1.0)


def test_acc_at_missing_prediction_counts_as_zero():
    pairs = [(None, _box(0, 0, 10, 10)), (_box(0, 0, 10, 10), _box(0, 0, 10, 10))]
    assert acc_at(pairs, 0.5) == 0.5


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
def test_acc_at_monotone_in_tau(ious):
    pairs = _pairs_from_ious([round(v, 3) for v in ious])
    values = [acc_at(pairs, tau) for tau in GROUNDING_TAUS]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_macc_extremes():
    perfect = [(_box(0, 0, 10, 10), _box(0, 0, 10, 10))] * 3
    assert macc(perfect) == 1.0
    empty = [(None, _box(0, 0, 10, 10))] * 3
    assert macc(empty) == 0.0


def test_macc_single_prediction_hand_value():
    # iou = 0.72 passes tau in {0.50, 0.55, 0.60, 0.65, 0.70}: 5 of 9
    pairs = _pairs_from_ious([0.72])
    value = iou(*pairs[0])
    assert value == pytest.approx(0.72, abs=5e-3)
    assert macc(pairs) == pytest.approx(5 / 9)


def test_macc_equals_mean_of_acc_values():
    rng = np.random.default_rng(5)
    pairs = _pairs_from_ious([round(float(v), 3) for v in rng.random(25)])
    mean = sum(acc_at(pairs, tau) for tau in GROUNDING_TAUS) / len(GROUNDING_TAUS)
    assert abs(macc(pairs) - mean) <= 1e-12


def test_average_precision_single_true_positive():
    dets = [EvalDetection("img", 1, _box(0, 0, 10, 10), 0.9)]
    gts = [EvalTruth("img", 1, _box(0, 0, 10, 9))]  # iou = 0.9
    result = average_precision(dets, gts)
    assert result["AP50"] == 1.0
    assert result["AP75"] == 1.0


def test_average_precision_no_detections():
    gts = [EvalTruth("img", 1, _box(0, 0, 10, 10))]
    result = average_precision([], gts)
    assert result == {"AP": 0.0, "AP50": 0.0, "AP75": 0.0}


def test_average_precision_low_ranked_false_positive_is_free():
    dets = [
        EvalDetection("img", 1, _box(0, 0, 10, 10), 0.9),
        EvalDetection("img", 1, _box(40, 40, 10, 10), 0.8),
    ]
    gts = [EvalTruth("img", 1, _box(0, 0, 10, 10))]
    assert average_precision(dets, gts)["AP50"] == 1.0


def test_average_precision_empty_ground_truth_warns():
    dets = [EvalDetection("img", 1, _box(0, 0, 10, 10), 0.9)]
    with pytest.warns(UserWarning):
        result = average_precision(dets, [])
    assert result["AP"] == 0.0


def test_average_precision_score_rescale_invariance():
    rng = np.random.default_rng(9)
    dets, gts = [], []
    for i in range(20):
        image = f"img{i % 3}"
        box = _box(int(rng.integers(0, 40)), int(rng.integers(0, 40)),
                   int(rng.integers(5, 20)), int(rng.integers(5, 20)))
        gts.append(EvalTruth(image, int(rng.integers(1, 4)), box))
        jitter = _box(box.x + int(rng.integers(0, 4)), box.y, box.w, box.h)
        dets.append(EvalDetection(image, int(rng.integers(1, 4)), jitter, float(rng.random())))
    base = average_precision(dets, gts)
    scaled = [EvalDetection(d.image, d.category, d.box, 0.37 * d.score) for d in dets]
    assert average_precision(scaled, gts) == base


def test_evaluate_grounding_report_shape():
    gt = {("img", 1): _box(0, 0, 10, 10), ("img", 2): _box(20, 20, 10, 10)}
    preds = {("img", 1): _box(0, 0, 10, 10)}
    report = evaluate_grounding(preds, gt)
    assert report.acc[0.5] == 0.5
    assert report.macc == pytest.approx(0.5)
    by_id = {r.expression_id: r for r in report.per_expression}
    assert by_id[1].correct and by_id[1].iou == 1.0
    assert not by_id[2].correct and by_id[2].iou == 0.0
