import json

import numpy as np
import pytest

from casd.evaluate import (
    Detection,
    average_precision,
    corloc,
    evaluate_detections,
    iou,
    iou_matrix,
    nms,
)
from casd.vision import BBox
from conftest import ref_nms


def det(x1, y1, x2, y2, cls, score, img):
    return Detection(BBox(x1, y1, x2, y2), cls, score, img)


def test_iou_unit_cases():
    assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0
    assert iou((0, 0, 2, 2), (5, 5, 7, 7)) == 0.0
    assert abs(iou((0, 0, 2, 2), (1, 0, 3, 2)) - 1 / 3) < 1e-12
    # touching edges do not intersect in continuous coordinates
    assert iou((0, 0, 2, 2), (2, 0, 4, 2)) == 0.0


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(5)
    a = np.sort(rng.uniform(0, 30, (12, 2, 2)), axis=2).transpose(0, 2, 1).reshape(12, 4)
    b = np.sort(rng.uniform(0, 30, (9, 2, 2)), axis=2).transpose(0, 2, 1).reshape(9, 4)
    m = iou_matrix(a, b)
    for i in range(12):
        for j in range(9):
            assert abs(m[i, j] - iou(a[i], b[j])) < 1e-12


def test_nms_matches_quadratic_reference():
    rng = np.random.default_rng(6)
    for _ in range(150):
        n = int(rng.integers(1, 16))
        xy = rng.uniform(0, 40, (n, 2))
        wh = rng.uniform(2, 20, (n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = rng.uniform(size=n).round(2)  # rounded so score ties happen
        thr = float(rng.choice([0.2, 0.3, 0.5, 0.7]))
        assert nms(boxes, scores, thr) == ref_nms(boxes, scores, thr)


def test_nms_keeps_highest_and_breaks_ties_by_index():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [30, 30, 40, 40]], dtype=float)
    assert nms(boxes, [0.5, 0.9, 0.5], 0.3) == [1, 2]
    # equal scores: earlier index wins
    assert nms(boxes[:2], [0.7, 0.7], 0.3) == [0]


def test_ap_interleaved_false_positive():
    gt = {"a": [(np.array([0, 0, 10, 10]), 0)], "b": [(np.array([20, 20, 30, 30]), 0)]}
    dets = [
        det(0, 0, 10, 10, 0, 0.9, "a"),
        det(40, 40, 50, 50, 0, 0.8, "a"),
        det(20, 20, 30, 30, 0, 0.7, "b"),
    ]
    # ranks: TP FP TP -> precision envelope gives 0.5*1 + 0.5*(2/3)
    assert abs(average_precision(dets, gt, 0) - 5 / 6) < 1e-12


def test_ap_duplicate_and_missed_gt():
    gt = {"a": [(np.array([0, 0, 10, 10]), 0), (np.array([20, 20, 30, 30]), 0)]}
    dets = [
        det(0, 0, 10, 10, 0, 0.9, "a"),
        det(0, 1, 10, 11, 0, 0.8, "a"),  # duplicate of the matched GT
    ]
    # second GT never found: recall stops at 0.5
    assert abs(average_precision(dets, gt, 0) - 0.5) < 1e-12


def test_ap_multi_step_envelope():
    gt = {
        "a": [(np.array([0, 0, 10, 10]), 0), (np.array([20, 0, 30, 10]), 0)],
        "b": [(np.array([0, 0, 10, 10]), 0)],
    }
    dets = [
        det(0, 0, 10, 10, 0, 0.9, "a"),
        det(20, 0, 30, 10, 0, 0.8, "a"),
        det(50, 50, 60, 60, 0, 0.7, "b"),
        det(0, 0, 10, 10, 0, 0.6, "b"),
    ]
    # TP TP FP TP -> AP = 1/3 + 1/3 + (1/3)(3/4) = 11/12
    assert abs(average_precision(dets, gt, 0) - 11 / 12) < 1e-12


def test_ap_no_detections_is_zero():
    gt = {"a": [(np.array([0, 0, 10, 10]), 0)]}
    assert average_precision([], gt, 0) == 0.0


def test_corloc_counts_top_detection_hits():
    gt = {
        "a": [(np.array([0, 0, 10, 10]), 0)],
        "b": [(np.array([0, 0, 10, 10]), 0)],
        "c": [(np.array([5, 5, 15, 15]), 1)],
    }
    dets = [
        det(0, 0, 10, 10, 0, 0.3, "a"),   # hit, even at a low score
        det(30, 30, 40, 40, 0, 0.9, "b"),  # top detection misses
        det(0, 0, 10, 10, 0, 0.2, "b"),    # better box but not the top one
        det(5, 5, 15, 15, 1, 0.5, "c"),
    ]
    # class 0: 1 of 2 images; class 1: 1 of 1 -> mean 0.75
    assert abs(corloc(dets, gt, 2) - 0.75) < 1e-12


def test_evaluate_skips_classes_without_gt():
    gt = {"a": [(np.array([0, 0, 10, 10]), 0)]}
    report = evaluate_detections([det(0, 0, 10, 10, 0, 0.9, "a")], gt, num_classes=3)
    assert report.per_class_ap == [1.0, 0.0, 0.0]
    assert report.map50 == 1.0  # classes 1 and 2 have no GT and are skipped
    parsed = json.loads(report.to_json())
    assert set(parsed) == {"map50", "corloc", "per_class"}


def test_nms_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        nms(np.zeros((2, 4)), [0.5], 0.3)
