"""Multiple-instance detection head with self-training refinement branches.

The base branch scores proposals with two parallel FC heads whose softmaxes
run along opposite directions (classes per proposal, proposals per class);
their elementwise product gives the proposal score matrix x [C, N], and
image-level class scores are its row sums.  Refinement branches are
(C+1)-way per-proposal classifiers (the extra row is background) supervised
by pseudo labels mined from the previous branch's scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .evaluate import Detection, iou_matrix, nms
from .vision import BBox, Linear

log = logging.getLogger(__name__)

SCORE_EPS = 1e-6
FG_IOU_THR = 0.5


class MILHead:
    def __init__(self, feat_dim, num_classes, k_branches, rng, with_regression=True):
        if k_branches < 1:
            raise ContractError("need at least one refinement branch")
        self.num_classes = num_classes
        self.k_branches = k_branches
        self.cls_head = Linear(feat_dim, num_classes, rng, name="head.cls")
        self.det_head = Linear(feat_dim, num_classes, rng, name="head.det")
        self.ref_heads = [
            Linear(feat_dim, num_classes + 1, rng, name=f"head.ref{k}") for k in range(k_branches)
        ]
        self.reg_head = Linear(feat_dim, 4, rng, name="head.reg") if with_regression else None

    def wsddn(self, vecs):
        """Base-branch proposal scores x [C, N] from vectors [N, D]."""
        cls_logits = ad.transpose2d(self.cls_head(vecs))
        det_logits = ad.transpose2d(self.det_head(vecs))
        return ad.mul(ad.softmax(cls_logits, axis=0), ad.softmax(det_logits, axis=1))

    def refinement(self, vecs):
        """Per-branch softmaxed score matrices [(C+1), N]."""
        return [ad.softmax(ad.transpose2d(head(vecs)), axis=0) for head in self.ref_heads]

    def offsets(self, vecs):
        """Box regression offsets [4, N] (center shift and log size)."""
        if self.reg_head is None:
            raise ContractError("this head was built without a regression branch")
        return ad.transpose2d(self.reg_head(vecs))

    def named_parameters(self):
        out = self.cls_head.named_parameters() + self.det_head.named_parameters()
        for head in self.ref_heads:
            out.extend(head.named_parameters())
        if self.reg_head is not None:
            out.extend(self.reg_head.named_parameters())
        return out


def image_scores(x):
    """Image-level class scores: row sums of the proposal score matrix."""
    return ad.tsum(x, axis=1)


def mlc_loss(p, labels):
    """Binary cross-entropy over classes against multi-hot image labels."""
    y = np.asarray(labels, dtype=p.data.dtype)
    if p.data.shape != y.shape:
        raise ShapeError(f"scores {p.data.shape} vs labels {y.shape}")
    pc = ad.clip(p, SCORE_EPS, 1.0 - SCORE_EPS)
    pos = ad.mul(ad.log(pc), y)
    neg = ad.mul(ad.log(ad.sub(1.0, pc)), 1.0 - y)
    return ad.mul(ad.tsum(ad.add(pos, neg)), -1.0)


@dataclass
class PseudoLabels:
    """Per-proposal supervision mined from the previous branch's scores."""

    label: np.ndarray     # [N] class index; == num_classes means background
    weight: np.ndarray    # [N] confidence carried over from the seed
    seed_box: np.ndarray  # [N, 4] assigned seed box (valid where label < C)
    num_classes: int

    @property
    def foreground(self):
        return self.label < self.num_classes

    @property
    def selected(self):
        return self.weight > 0


def mine_pseudo_labels(scores, labels, proposals):
    """Seed the top proposal of each present class and label its neighbours.

    Proposals within IoU >= 0.5 of a seed take that seed's class and score
    as weight (highest-IoU seed wins, lower class index on ties); the rest
    become background with weight 1.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    y = np.asarray(labels)
    num_classes = y.shape[0]
    if s.shape[0] < num_classes:
        raise ShapeError(f"score matrix has {s.shape[0]} rows for {num_classes} classes")
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    n = len(proposals)
    if s.shape[1] != n:
        raise ShapeError(f"score matrix covers {s.shape[1]} proposals, got {n}")
    pos = np.flatnonzero(y > 0.5)
    if pos.size == 0:
        raise ContractError("cannot mine pseudo labels for an image with no positive class")
    seed_idx = s[pos].argmax(axis=1)
    seed_boxes = proposals[seed_idx]
    ious = iou_matrix(proposals, seed_boxes)
    best = ious.argmax(axis=1)  # ties -> first seed, i.e. lowest class index
    best_iou = ious[np.arange(n), best]
    fg = best_iou >= FG_IOU_THR
    label = np.where(fg, pos[best], num_classes).astype(np.int64)
    weight = np.where(fg, s[pos[best], seed_idx[best]], 1.0).astype(np.float64)
    return PseudoLabels(
        label=label,
        weight=weight,
        seed_box=seed_boxes[best],
        num_classes=num_classes,
    )


def refinement_loss(x_k, pseudo):
    """Weighted cross-entropy of a refinement branch against mined labels."""
    c1, n = x_k.data.shape
    if c1 != pseudo.num_classes + 1:
        raise ShapeError(f"branch matrix has {c1} rows, expected {pseudo.num_classes + 1}")
    if n != len(pseudo.label):
        raise ShapeError(f"branch matrix covers {n} proposals, labels cover {len(pseudo.label)}")
    selected = pseudo.selected
    n_k = int(selected.sum())
    if n_k == 0:
        log.warning("refinement branch got an empty mined set; loss is 0")
        return Tensor(np.zeros((), dtype=x_k.data.dtype))
    mask = np.zeros((c1, n), dtype=np.float64)
    mask[pseudo.label, np.arange(n)] = pseudo.weight * selected
    mask /= n_k
    return ad.mul(ad.tsum(ad.mul(ad.log(ad.clip(x_k, SCORE_EPS, 1.0)), mask.astype(x_k.data.dtype))), -1.0)


def encode_offsets(box, seed):
    """Offsets (tx, ty, tw, th) that map ``box`` onto ``seed``."""
    t = encode_offsets_array(box.as_array()[None, :], seed.as_array()[None, :])
    return t[:, 0]


def encode_offsets_array(boxes, targets):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    if np.any(bw <= 0) or np.any(bh <= 0):
        raise ShapeError("cannot encode offsets for a degenerate proposal box")
    tw_ = targets[:, 2] - targets[:, 0]
    th_ = targets[:, 3] - targets[:, 1]
    if np.any(tw_ <= 0) or np.any(th_ <= 0):
        raise ShapeError("cannot encode offsets onto a degenerate target box")
    t = np.empty((4, len(boxes)), dtype=np.float64)
    t[0] = ((targets[:, 0] + targets[:, 2]) / 2 - (boxes[:, 0] + boxes[:, 2]) / 2) / bw
    t[1] = ((targets[:, 1] + targets[:, 3]) / 2 - (boxes[:, 1] + boxes[:, 3]) / 2) / bh
    t[2] = np.log(tw_ / bw)
    t[3] = np.log(th_ / bh)
    return t


def decode_offsets(box, t):
    decoded = decode_boxes(box.as_array()[None, :], np.asarray(t, dtype=np.float64).reshape(4, 1))
    return BBox.from_array(decoded[0])


def decode_boxes(proposals, t, img_hw=None):
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(t, dtype=np.float64).reshape(4, -1)
    bw = proposals[:, 2] - proposals[:, 0]
    bh = proposals[:, 3] - proposals[:, 1]
    cx = (proposals[:, 0] + proposals[:, 2]) / 2 + t[0] * bw
    cy = (proposals[:, 1] + proposals[:, 3]) / 2 + t[1] * bh
    w = bw * np.exp(t[2])
    h = bh * np.exp(t[3])
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if img_hw is not None:
        out[:, 0::2] = np.clip(out[:, 0::2], 0, img_hw[1])
        out[:, 1::2] = np.clip(out[:, 1::2], 0, img_hw[0])
    return out


def regression_loss(pred_t, pseudo, proposals):
    """Smooth-L1 between predicted offsets and seed-box offsets, foreground only."""
    if pred_t.data.shape[0] != 4:
        raise ShapeError(f"offsets must be [4, N], got {pred_t.data.shape}")
    fg = pseudo.foreground & pseudo.selected
    g = int(fg.sum())
    if g == 0:
        return Tensor(np.zeros((), dtype=pred_t.data.dtype))
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    targets = np.zeros((4, len(proposals)))
    targets[:, fg] = encode_offsets_array(proposals[fg], pseudo.seed_box[fg])
    mask = (fg.astype(np.float64) / g)[None, :]
    target_t = Tensor(targets.astype(pred_t.data.dtype))
    return ad.tsum(ad.mul(ad.smooth_l1_map(pred_t, target_t), mask.astype(pred_t.data.dtype)))


def psa_average(mats):
    """Proposal-score aggregation: plain mean of aligned score matrices."""
    if len(mats) < 1:
        raise ContractError("psa_average needs at least one matrix")
    shape = mats[0].data.shape
    for m in mats[1:]:
        if m.data.shape != shape:
            raise ShapeError(f"psa_average: shape {m.data.shape} != {shape}")
    acc = mats[0]
    for m in mats[1:]:
        acc = ad.add(acc, m)
    return ad.mul(acc, 1.0 / len(mats))


def detections_from_scores(class_scores, proposals, nms_thr, offsets=None, img_hw=None, image_id=""):
    """Per-class NMS over scored proposals -> Detection list."""
    class_scores = np.asarray(class_scores)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    boxes = decode_boxes(proposals, offsets, img_hw=img_hw) if offsets is not None else proposals
    out = []
    for c in range(class_scores.shape[0]):
        keep = nms(boxes, class_scores[c], nms_thr)
        for i in keep:
            out.append(Detection(BBox.from_array(boxes[i]), c, float(class_scores[c, i]), image_id))
    return out


def infer_detections(branch_mats, proposals, nms_thr, offsets=None, img_hw=None, image_id=""):
    """Sum refinement-branch scores (background row dropped), then NMS."""
    if not branch_mats:
        raise ContractError("need at least one branch score matrix")
    mats = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in branch_mats]
    summed = np.zeros_like(mats[0][:-1])
    for m in mats:
        if m.shape != mats[0].shape:
            raise ShapeError("branch matrices must share a shape")
        summed += m[:-1]
    off = offsets.data if isinstance(offsets, Tensor) else offsets
    return detections_from_scores(summed, proposals, nms_thr, off, img_hw, image_id)
