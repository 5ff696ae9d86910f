"""Detection metrics: IoU, greedy NMS, average precision, mAP and CorLoc.

Boxes are continuous corner coordinates, so a box's area is
``(x2 - x1) * (y2 - y1)`` with no pixel offset.  A detection counts as
correct at IoU strictly greater than 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .vision import BBox

IOU_MATCH_THR = 0.5


@dataclass
class Detection:
    box: BBox
    class_id: int
    score: float
    image_id: str = ""


@dataclass
class EvalReport:
    per_class_ap: list
    map50: float
    corloc: float
    gt_count: int = 0
    det_count: int = 0

    def to_json(self):
        return json.dumps(
            {
                "map50": float(self.map50),
                "corloc": float(self.corloc),
                "per_class": [float(v) for v in self.per_class_ap],
            }
        )


def iou(a, b):
    """Intersection over union of two boxes (BBox or length-4 arrays)."""
    ax1, ay1, ax2, ay2 = (a.x1, a.y1, a.x2, a.y2) if isinstance(a, BBox) else a
    bx1, by1, bx2, by2 = (b.x1, b.y1, b.x2, b.y2) if isinstance(b, BBox) else b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU between two [N,4] / [M,4] arrays -> [N, M]."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, thr):
    """Greedy non-maximum suppression for one class.

    Returns indices of kept boxes in descending score order.  A box is
    suppressed when its IoU with an already kept box exceeds ``thr``;
    score ties are broken by the original index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i][None, :], boxes[rest])[0]
        order = rest[ious <= thr]
    return keep


def average_precision(detections, gt_by_image, class_id, iou_thr=IOU_MATCH_THR):
    """All-points-interpolated AP for one class over the whole eval set.

    ``detections``: iterable of Detection (any class; filtered here).
    ``gt_by_image``: dict image_id -> list of (box array, class_id).
    Each GT box matches at most one detection; detections are visited in
    descending score order and take the highest-IoU unmatched GT (lowest
    index on ties).
    """
    gts = {}
    total_gt = 0
    for img, items in gt_by_image.items():
        boxes = [np.asarray(b, dtype=np.float64) for b, c in items if c == class_id]
        if boxes:
            gts[img] = {"boxes": np.stack(boxes), "used": np.zeros(len(boxes), dtype=bool)}
            total_gt += len(boxes)
    if total_gt == 0:
        return 0.0

    dets = [d for d in detections if d.class_id == class_id]
    dets.sort(key=lambda d: (-d.score, d.image_id))
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for j, det in enumerate(dets):
        entry = gts.get(det.image_id)
        if entry is None:
            fp[j] = 1
            continue
        ious = iou_matrix(det.box.as_array()[None, :], entry["boxes"])[0]
        best = int(np.argmax(ious))  # lowest GT index wins ties
        if ious[best] > iou_thr and not entry["used"][best]:
            entry["used"][best] = True
            tp[j] = 1
        else:
            fp[j] = 1

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    # precision envelope, then sum area under every recall step
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def corloc(detections, gt_by_image, num_classes, iou_thr=IOU_MATCH_THR):
    """Correct-localization rate, averaged over classes.

    For each class, the fraction of images containing it whose single
    top-scoring detection of that class overlaps a same-class GT box at
    IoU > ``iou_thr``.
    """
    top = {}
    for d in detections:
        key = (d.image_id, d.class_id)
        if key not in top or d.score > top[key].score:
            top[key] = d
    rates = []
    for c in range(num_classes):
        hits = 0
        positives = 0
        for img, items in gt_by_image.items():
            boxes = [np.asarray(b, dtype=np.float64) for b, cls in items if cls == c]
            if not boxes:
                continue
            positives += 1
            det = top.get((img, c))
            if det is None:
                continue
            ious = iou_matrix(det.box.as_array()[None, :], np.stack(boxes))[0]
            if ious.max() > iou_thr:
                hits += 1
        if positives:
            rates.append(hits / positives)
    return float(np.mean(rates)) if rates else 0.0


def evaluate_detections(detections, gt_by_image, num_classes):
    """Score a detection set; classes with no GT are skipped in the mean."""
    aps = []
    counted = []
    for c in range(num_classes):
        has_gt = any(cls == c for items in gt_by_image.values() for _, cls in items)
        ap = average_precision(detections, gt_by_image, c) if has_gt else 0.0
        aps.append(ap)
        if has_gt:
            counted.append(ap)
    gt_count = sum(len(items) for items in gt_by_image.values())
    return EvalReport(
        per_class_ap=aps,
        map50=float(np.mean(counted)) if counted else 0.0,
        corloc=corloc(detections, gt_by_image, num_classes),
        gt_count=gt_count,
        det_count=len(detections),
    )
