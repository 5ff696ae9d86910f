"""Training loop, loss assembly, evaluation driver and attention dumps.

One step forwards the configured views of a single image (original, flipped,
rescaled by a factor drawn from the training scale set), assembles the
weighted loss and applies one SGD update.  The per-step RNG is derived from
(seed, step), so a resumed run replays exactly the same stream as an
uninterrupted one.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import distill
from . import mil
from .autodiff import Tensor
from .config import config_hash
from .data import load_eval_sample, load_manifest, load_train_sample
from .errors import ContractError
from .evaluate import evaluate_detections
from .model import Detector, load_checkpoint, save_checkpoint
from .tnsr import save_tensor
from .vision import flip_boxes, flip_map, scale_boxes, scale_image_array

CHECKPOINT_NAME = "checkpoint.zip"
METRICS_NAME = "metrics.jsonl"


@dataclass
class LossBreakdown:
    """Raw (unweighted) loss components of one step, as plain floats."""

    mlc: float
    ref: list
    reg: list
    iw: list
    lw: list
    breg: list
    alpha: float
    beta: float
    gamma: float

    @property
    def total(self):
        t = self.mlc
        for k in range(len(self.ref)):
            t += self.alpha * self.ref[k] + self.beta * self.reg[k]
            t += self.gamma * (self.iw[k] + self.lw[k] + self.breg[k])
        return t

    def log_line(self, step, lr):
        return json.dumps(
            {
                "iter": int(step),
                "lr": float(lr),
                "total": float(self.total),
                "mlc": self.mlc,
                "ref": self.ref,
                "reg": self.reg,
                "iw": self.iw,
                "lw": self.lw,
                "breg": self.breg,
            }
        )


def lr_at(step, cfg):
    """Step learning rate: divided by the decay factor at each decay point."""
    drops = sum(1 for d in cfg.decay_at_iter if step >= d)
    return cfg.lr / (cfg.lr_decay_factor ** drops)


def _forward_views(model, sample, cfg, rng):
    """Forward the image's transformed copies; the per-step batch is the
    set of transforms, for every component configuration.  The scale factor
    is drawn every step so the RNG stream does not depend on which
    components are enabled."""
    image = sample.image
    boxes = np.asarray(sample.proposals, dtype=np.float64).reshape(-1, 4)
    w = image.shape[2]
    s = float(rng.choice(np.asarray(cfg.train_scales))) if "scale" in cfg.transforms else 1.0

    # per-block maps are pooled only where the layer-wise loss reads them
    lw_blocks = tuple(cfg.lw_blocks) if cfg.enable_lw and cfg.gamma > 0 else ()
    views = {"orig": model.forward_view(image, boxes, need_offsets=cfg.enable_reg, pool_blocks=lw_blocks)}
    if "flip" in cfg.transforms:
        views["flip"] = model.forward_view(np.flip(image, axis=-1).copy(), flip_boxes(boxes, w))
    if "scale" in cfg.transforms:
        views["scale"] = model.forward_view(scale_image_array(image, s), scale_boxes(boxes, s))
    return views


def _mean_terms(terms):
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms)) if len(terms) > 1 else total


def compute_losses(model, sample, cfg, rng, frozen=None, capture=None):
    """Build the full loss graph for one sample; returns (loss, breakdown).

    The mined pseudo-labels and the distillation teachers are stop-gradient
    quantities.  ``capture`` (a dict) records them; passing that dict back
    as ``frozen`` replays them as constants, which turns the loss into the
    exact function that ``backward()`` differentiates.  Used by the
    finite-difference and stop-gradient checks.
    """
    views = _forward_views(model, sample, cfg, rng)
    order = [t for t in ("orig", "flip", "scale") if t in views]
    kk = cfg.k

    # mining reads the view-averaged score matrices when PSA is on and the
    # original view's otherwise
    if cfg.enable_psa and len(order) > 1:
        x_base = mil.psa_average([views[t].x for t in order])
        x_branch = [mil.psa_average([views[t].x_k[k] for t in order]) for k in range(kk)]
    else:
        x_base = views["orig"].x
        x_branch = list(views["orig"].x_k)

    # classification and refinement average over the transformed copies
    l_mlc = _mean_terms(
        [mil.mlc_loss(mil.image_scores(views[t].x), sample.labels) for t in order]
    )
    terms = [l_mlc]
    boxes = views["orig"].boxes

    pseudos = []
    ref_vals, reg_vals, iw_vals, lw_vals, breg_vals = [], [], [], [], []
    prev_scores = x_base
    for k in range(kk):
        if frozen is not None:
            pl = frozen["pseudos"][k]
        else:
            pl = mil.mine_pseudo_labels(prev_scores, sample.labels, boxes)
        pseudos.append(pl)
        l_ref = _mean_terms([mil.refinement_loss(views[t].x_k[k], pl) for t in order])
        terms.append(ad.mul(l_ref, cfg.alpha))
        ref_vals.append(l_ref.item())
        prev_scores = x_branch[k]
    if capture is not None:
        capture["pseudos"] = list(pseudos)

    reg_vals = [0.0] * kk
    if cfg.enable_reg:
        l_reg = mil.regression_loss(views["orig"].offsets, pseudos[-1], boxes)
        terms.append(ad.mul(l_reg, cfg.beta))
        reg_vals[-1] = l_reg.item()

    casd_on = cfg.gamma > 0
    att = None
    if casd_on and (cfg.enable_iw or cfg.baseline_regularizer == "attn_consistency"):
        att = {t: distill.proposal_attention(views[t].pooled[-1]) for t in order}

    iw_vals = [0.0] * kk
    if cfg.enable_iw and casd_on:
        if frozen is not None:
            teacher = Tensor(frozen["iw_teacher"])
        else:
            teacher = distill.comprehensive_iw(att["orig"], att["flip"], att["scale"])
        if capture is not None:
            capture["iw_teacher"] = teacher.data.copy()
        if cfg.enable_ia:
            students = {
                t: distill.inverted_attention(views[t].pooled[-1], rng, cfg.ia_p, cfg.ia_q)
                for t in order
            }
        else:
            students = att
        for k in range(kk):
            l_iw = distill.iw_casd_loss(
                students["orig"], students["flip"], students["scale"], teacher, mask=pseudos[k].selected
            )
            terms.append(ad.mul(l_iw, cfg.gamma))
            iw_vals[k] = l_iw.item()

    lw_vals = [0.0] * kk
    if cfg.enable_lw and casd_on:
        block_atts = [distill.proposal_attention(views["orig"].pooled[q]) for q in cfg.lw_blocks]
        if frozen is not None:
            lw_teacher = Tensor(frozen["lw_teacher"])
        else:
            lw_teacher = distill.comprehensive_lw(block_atts)
        if capture is not None:
            capture["lw_teacher"] = lw_teacher.data.copy()
        for k in range(kk):
            l_lw = distill.lw_casd_loss(block_atts, lw_teacher, mask=pseudos[k].selected)
            terms.append(ad.mul(l_lw, cfg.gamma))
            lw_vals[k] = l_lw.item()

    breg_vals = [0.0] * kk
    if casd_on and cfg.baseline_regularizer == "pred_consistency":
        for k in range(kk):
            l_b = distill.prediction_consistency([views[t].x_k[k] for t in order], mask=pseudos[k].selected)
            terms.append(ad.mul(l_b, cfg.gamma))
            breg_vals[k] = l_b.item()
    elif casd_on and cfg.baseline_regularizer == "attn_consistency":
        aligned = [att["orig"], flip_map(att["flip"]), att["scale"]]
        for k in range(kk):
            l_b = distill.attention_consistency(aligned, mask=pseudos[k].selected)
            terms.append(ad.mul(l_b, cfg.gamma))
            breg_vals[k] = l_b.item()

    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    breakdown = LossBreakdown(
        mlc=l_mlc.item(),
        ref=ref_vals,
        reg=reg_vals,
        iw=iw_vals,
        lw=lw_vals,
        breg=breg_vals,
        alpha=cfg.alpha,
        beta=cfg.beta,
        gamma=cfg.gamma,
    )
    return total, breakdown


def train_step(model, sample, cfg, rng, lr=None):
    """One forward/backward/SGD update; returns the loss breakdown."""
    total, breakdown = compute_losses(model, sample, cfg, rng)
    total.backward()
    ad.sgd_step(model.parameters(), cfg.lr if lr is None else lr, cfg.momentum, cfg.weight_decay)
    return breakdown


def run_training(cfg, data_dir, out_dir, resume=None, quiet=True, stop_after=None):
    """Train to ``cfg.max_iters``; writes metrics.jsonl and checkpoint.zip.

    ``stop_after`` halts (and checkpoints) after that many additional steps,
    emulating an interruption: resuming from the written checkpoint replays
    the exact step stream of an uninterrupted run.
    """
    cfg.validate()
    manifest = load_manifest(Path(data_dir) / "train")
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    if resume is not None:
        model, start, ck_cfg = load_checkpoint(resume)
        if config_hash(ck_cfg) != config_hash(cfg):
            raise ContractError("checkpoint was trained with a different config")
        mode = "a"
    else:
        model = Detector(manifest.num_classes, cfg, rng=np.random.default_rng([cfg.seed, 11]))
        start = 0
        mode = "w"
    if start >= cfg.max_iters:
        raise ContractError(f"checkpoint is already at iteration {start} >= max_iters {cfg.max_iters}")
    end = cfg.max_iters if stop_after is None else min(cfg.max_iters, start + int(stop_after))

    with open(out_dir / METRICS_NAME, mode) as metrics:
        for step in range(start, end):
            rng = np.random.default_rng([cfg.seed, 202, step])
            idx = int(rng.integers(manifest.count))
            sample = load_train_sample(manifest, idx)
            lr = lr_at(step, cfg)
            breakdown = train_step(model, sample, cfg, rng, lr)
            if step % cfg.log_every == 0 or step == cfg.max_iters - 1:
                metrics.write(breakdown.log_line(step, lr) + "\n")
                if not quiet:
                    print(breakdown.log_line(step, lr), flush=True)
    ckpt = out_dir / CHECKPOINT_NAME
    save_checkpoint(ckpt, model, end, cfg)
    return ckpt


def predict_image(model, image, proposals, cfg, image_id=""):
    """Detections for one image: branch scores summed, averaged over the
    evaluation scale set (plus the original), then per-class NMS."""
    with ad.no_grad():
        summed = []
        offsets = None
        h, w = image.shape[1], image.shape[2]
        variants = [(image, np.asarray(proposals, dtype=np.float64), True)]
        for s in cfg.eval_scales:
            variants.append((scale_image_array(image, s), scale_boxes(proposals, s), False))
        for img, bx, is_orig in variants:
            view = model.forward_view(img, bx, need_offsets=is_orig and cfg.enable_reg)
            acc = np.zeros_like(view.x_k[0].data[:-1])
            for xk in view.x_k:
                acc += xk.data[:-1]
            summed.append(acc)
            if is_orig and view.offsets is not None:
                offsets = view.offsets.data
        avg = np.mean(np.stack(summed), axis=0)
    return mil.detections_from_scores(
        avg, proposals, cfg.nms_thr, offsets=offsets, img_hw=(h, w), image_id=image_id
    )


def run_eval(ckpt_path, data_dir, split="test"):
    """Evaluate a checkpoint over one split; returns an EvalReport."""
    model, _, cfg = load_checkpoint(ckpt_path)
    manifest = load_manifest(Path(data_dir) / split)
    detections = []
    gt_by_image = {}
    for i in range(manifest.count):
        sample = load_eval_sample(manifest, i)
        detections.extend(predict_image(model, sample.image, sample.proposals, cfg, sample.sample_id))
        gt_by_image[sample.sample_id] = sample.gt
    return evaluate_detections(detections, gt_by_image, manifest.num_classes)


def dump_attention_maps(ckpt_path, data_dir, split, sample_index, proposal_ids, out_dir, scale=0.75):
    """Write TNSR + PGM pairs of every attention map for chosen proposals."""
    model, _, cfg = load_checkpoint(ckpt_path)
    manifest = load_manifest(Path(data_dir) / split)
    sample = load_train_sample(manifest, sample_index)
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)

    image = sample.image
    boxes = np.asarray(sample.proposals, dtype=np.float64)
    n = len(boxes)
    ids = sorted(set(int(r) for r in proposal_ids))
    for r in ids:
        if not 0 <= r < n:
            raise ContractError(f"proposal id {r} out of range [0, {n})")

    with ad.no_grad():
        h, w = image.shape[1], image.shape[2]
        orig = model.forward_view(image, boxes, pool_blocks=tuple(cfg.lw_blocks))
        flip = model.forward_view(np.flip(image, axis=-1).copy(), flip_boxes(boxes, w))
        scl = model.forward_view(scale_image_array(image, scale), scale_boxes(boxes, scale))
        att = distill.proposal_attention(orig.pooled[-1])
        att_flip = flip_map(distill.proposal_attention(flip.pooled[-1]))
        att_scale = distill.proposal_attention(scl.pooled[-1])
        teacher_iw = distill.comprehensive_iw(
            distill.proposal_attention(orig.pooled[-1]),
            distill.proposal_attention(flip.pooled[-1]),
            distill.proposal_attention(scl.pooled[-1]),
        )
        block_atts = {q: distill.proposal_attention(orig.pooled[q]) for q in cfg.lw_blocks}
        teacher_lw = distill.comprehensive_lw(list(block_atts.values()))

    maps = {"orig": att, "flip_aligned": att_flip, "scale": att_scale, "iw": teacher_iw, "lw": teacher_lw}
    for q, a in block_atts.items():
        maps[f"block{q}"] = a
    written = []
    for kind, tensor in maps.items():
        for r in ids:
            stem = out_dir / f"attn_{kind}_{r:04d}"
            save_tensor(f"{stem}.tnsr", tensor.data[r])
            distill.write_pgm(f"{stem}.pgm", tensor.data[r])
            written.append(stem)
    return written
