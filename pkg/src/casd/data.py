"""Synthetic shape-detection data.

Each sample is a small RGB image of bright filled shapes (class 0 circle,
1 square, 2 triangle) over uniform background noise, with image-level labels,
tight ground-truth boxes and a class-agnostic proposal set.  The generator
rejects placements until every GT box is reachable by at least one proposal
at IoU >= 0.5, so the detection task is always solvable from the proposals.

Training code gets a view without the GT fields; only evaluation loads them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .evaluate import iou_matrix
from .tnsr import load_tensor, save_tensor

CLASS_NAMES = ("circle", "square", "triangle")

GRID_SIZES = (12, 20, 32, 48)
N_JITTER_BOXES = 10

BG_NOISE_HI = 0.30          # background is U(0, BG_NOISE_HI) per pixel/channel
COLOR_LO, COLOR_HI = 0.55, 1.00
SIDE_LO, SIDE_HI = 14.0, 26.0
MAX_SHAPES = 3
MAX_INSTANCE_IOU = 0.30     # placed shapes may overlap at most this much
MIN_PROPOSAL_IOU = 0.50     # every GT must be covered by some proposal


@dataclass
class TrainSample:
    image: np.ndarray       # [3, h, w] float32 in [0, 1]
    labels: np.ndarray      # [C] multi-hot float32
    proposals: np.ndarray   # [N, 4] float32
    sample_id: str


@dataclass
class EvalSample(TrainSample):
    gt: list = None         # list of (box array [4], class_id)


def generate_proposals(h, w, seed):
    """Class-agnostic boxes: multi-scale sliding grid plus jittered extras."""
    boxes = []
    for side in GRID_SIZES:
        stride = side // 2
        if side > min(h, w):
            continue
        for y0 in range(0, h - side + 1, stride):
            for x0 in range(0, w - side + 1, stride):
                boxes.append((float(x0), float(y0), float(x0 + side), float(y0 + side)))
    rng = np.random.default_rng(seed)
    added = 0
    while added < N_JITTER_BOXES:
        side_x = rng.uniform(10, min(w, 52))
        side_y = rng.uniform(10, min(h, 52))
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        x1 = np.clip(cx - side_x / 2, 0, w)
        x2 = np.clip(cx + side_x / 2, 0, w)
        y1 = np.clip(cy - side_y / 2, 0, h)
        y2 = np.clip(cy + side_y / 2, 0, h)
        if x2 - x1 < 6 or y2 - y1 < 6:
            continue
        boxes.append((float(x1), float(y1), float(x2), float(y2)))
        added += 1
    seen = set()
    unique = []
    for b in boxes:
        if b not in seen:
            seen.add(b)
            unique.append(b)
    return np.asarray(unique, dtype=np.float32)


def _raster_mask(class_id, box, size):
    yy, xx = np.mgrid[0:size, 0:size]
    yy = yy + 0.5
    xx = xx + 0.5
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    if class_id == 0:  # filled circle
        r = (x2 - x1) / 2
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if class_id == 1:  # filled square
        return (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    if class_id == 2:  # filled triangle, apex at the top
        inside_y = (yy >= y1) & (yy < y2)
        half = (yy - y1) / max(y2 - y1, 1e-9) * ((x2 - x1) / 2)
        return inside_y & (np.abs(xx - cx) <= half)
    raise ContractError(f"unknown class id {class_id}")


def make_record(base_seed, index, num_classes=3, size=64):
    """Build one sample in memory, deterministically from (base_seed, index)."""
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ContractError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
    proposals = generate_proposals(size, size, [base_seed, index, 1])
    rng = np.random.default_rng([base_seed, index])
    while True:
        image = rng.uniform(0.0, BG_NOISE_HI, (3, size, size))
        n_shapes = int(rng.integers(1, MAX_SHAPES + 1))
        placed = []
        for _ in range(n_shapes):
            for _attempt in range(80):
                cls = int(rng.integers(num_classes))
                side = rng.uniform(SIDE_LO, SIDE_HI)
                cx = rng.uniform(side / 2, size - side / 2)
                cy = rng.uniform(side / 2, size - side / 2)
                box = np.array([cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2])
                if placed:
                    others = np.stack([b for b, _ in placed])
                    if iou_matrix(box[None, :], others).max() > MAX_INSTANCE_IOU:
                        continue
                if iou_matrix(box[None, :], proposals).max() < MIN_PROPOSAL_IOU:
                    continue
                color = rng.uniform(COLOR_LO, COLOR_HI, 3)
                mask = _raster_mask(cls, box, size)
                image[:, mask] = color[:, None]
                placed.append((box, cls))
                break
        if placed:
            break
    labels = np.zeros(num_classes, dtype=np.float32)
    for _, cls in placed:
        labels[cls] = 1.0
    return EvalSample(
        image=image.astype(np.float32),
        labels=labels,
        proposals=proposals,
        sample_id=f"{index:05d}",
        gt=[(b.astype(np.float64), c) for b, c in placed],
    )


def generate_dataset(out_dir, seed, count, split, num_classes=3, size=64):
    """Write one split (images, proposals, GT, labels, manifest) to disk."""
    root = Path(out_dir) / split
    for sub in ("images", "gt", "proposals"):
        os.makedirs(root / sub, exist_ok=True)
    image_files, proposal_files, gt_files = [], [], []
    labels = np.zeros((count, num_classes), dtype=np.float32)
    for i in range(count):
        rec = make_record(seed, i, num_classes=num_classes, size=size)
        image_files.append(f"images/{rec.sample_id}.tnsr")
        proposal_files.append(f"proposals/{rec.sample_id}.tnsr")
        gt_files.append(f"gt/{rec.sample_id}.json")
        save_tensor(root / image_files[-1], rec.image)
        save_tensor(root / proposal_files[-1], rec.proposals)
        with open(root / gt_files[-1], "w") as f:
            json.dump(
                [{"box": [float(v) for v in b], "class": int(c)} for b, c in rec.gt],
                f,
                sort_keys=True,
            )
        labels[i] = rec.labels
    save_tensor(root / "labels.tnsr", labels)
    manifest = {
        "split": split,
        "count": count,
        "num_classes": num_classes,
        "image_size": size,
        "seed": seed,
        "images": image_files,
        "proposals": proposal_files,
        "gt": gt_files,
        "labels": "labels.tnsr",
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return load_manifest(root)


@dataclass
class DatasetManifest:
    root: Path
    split: str
    count: int
    num_classes: int
    image_size: int
    seed: int
    image_files: list
    proposal_files: list
    gt_files: list
    labels: np.ndarray


def load_manifest(split_dir):
    split_dir = Path(split_dir)
    path = split_dir / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json under {split_dir}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None
    required = ("split", "count", "num_classes", "image_size", "seed", "images", "proposals", "gt", "labels")
    for key in required:
        if key not in raw:
            raise FormatError(f"{path}: missing key '{key}'")
    count = int(raw["count"])
    for key in ("images", "proposals", "gt"):
        if len(raw[key]) != count:
            raise FormatError(f"{path}: {key} lists {len(raw[key])} files, count is {count}")
    labels = load_tensor(split_dir / raw["labels"])
    if labels.shape != (count, int(raw["num_classes"])):
        raise FormatError(f"labels tensor has shape {labels.shape}, expected ({count}, {raw['num_classes']})")
    return DatasetManifest(
        root=split_dir,
        split=raw["split"],
        count=count,
        num_classes=int(raw["num_classes"]),
        image_size=int(raw["image_size"]),
        seed=int(raw["seed"]),
        image_files=list(raw["images"]),
        proposal_files=list(raw["proposals"]),
        gt_files=list(raw["gt"]),
        labels=labels,
    )


def _load_arrays(manifest, index):
    if not 0 <= index < manifest.count:
        raise IndexError(f"sample index {index} out of range [0, {manifest.count})")
    image = load_tensor(manifest.root / manifest.image_files[index])
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"image {index} has shape {image.shape}, expected [3,h,w]")
    proposals = load_tensor(manifest.root / manifest.proposal_files[index])
    if proposals.ndim != 2 or proposals.shape[1] != 4 or len(proposals) == 0:
        raise FormatError(f"proposals {index} have shape {proposals.shape}, expected [N,4]")
    return image, proposals


def load_train_sample(manifest, index):
    """Training view of a sample: image, labels, proposals.  No GT boxes."""
    image, proposals = _load_arrays(manifest, index)
    return TrainSample(
        image=image,
        labels=manifest.labels[index],
        proposals=proposals,
        sample_id=f"{index:05d}",
    )


def load_eval_sample(manifest, index):
    image, proposals = _load_arrays(manifest, index)
    with open(manifest.root / manifest.gt_files[index]) as f:
        raw = json.load(f)
    gt = []
    for item in raw:
        cls = int(item["class"])
        if not 0 <= cls < manifest.num_classes:
            raise FormatError(f"gt class {cls} out of range for {manifest.num_classes} classes")
        gt.append((np.asarray(item["box"], dtype=np.float64), cls))
    return EvalSample(
        image=image,
        labels=manifest.labels[index],
        proposals=proposals,
        sample_id=f"{index:05d}",
        gt=gt,
    )


def proposal_coverage(manifest):
    """Fraction of GT boxes with a proposal at IoU >= 0.5."""
    covered = 0
    total = 0
    for i in range(manifest.count):
        sample = load_eval_sample(manifest, i)
        for box, _ in sample.gt:
            total += 1
            if iou_matrix(box[None, :], sample.proposals).max() >= MIN_PROPOSAL_IOU:
                covered += 1
    return covered / total if total else 0.0
