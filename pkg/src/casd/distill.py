"""Attention maps over pooled proposal features and their distillation losses.

A proposal's attention map is the sigmoid of the channel mean of its pooled
features.  Teachers are built by taking the elementwise max over aligned
attention sources (image-wise: original / flipped / rescaled inputs;
layer-wise: different backbone blocks) and are detached, so distillation
pulls each source toward the combined map without gradients flowing through
the teacher itself.  Distances are means of squared elementwise differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .vision import flip_map

JS_EPS = 1e-12


def proposal_attention(pooled):
    """Sigmoid of the channel mean: [N,L,H,W] -> [N,H,W] (or [L,H,W] -> [H,W])."""
    if pooled.data.ndim == 4:
        return ad.sigmoid(ad.channel_mean(pooled, axis=1))
    if pooled.data.ndim == 3:
        return ad.sigmoid(ad.channel_mean(pooled, axis=0))
    raise ShapeError(f"expected pooled features [N,L,H,W] or [L,H,W], got {pooled.data.shape}")


def _as_batched(attn):
    if attn.data.ndim == 2:
        return ad.reshape(attn, (1,) + attn.data.shape)
    if attn.data.ndim == 3:
        return attn
    raise ShapeError(f"attention maps must be [N,H,W] or [H,W], got {attn.data.shape}")


def comprehensive_iw(attn, attn_flip, attn_scale):
    """Image-wise teacher: detached elementwise max of the aligned sources.

    ``attn_flip`` is given in the flipped image's frame and is realigned
    here.  The result carries no gradient history.
    """
    sources = [attn.detach(), flip_map(attn_flip.detach()), attn_scale.detach()]
    return ad.elementwise_max(sources)


def comprehensive_lw(block_attns):
    """Layer-wise teacher: detached elementwise max over block attention maps."""
    if len(block_attns) < 2:
        raise ContractError("layer-wise aggregation needs at least two block maps")
    return ad.elementwise_max([a.detach() for a in block_attns])


def _masked_map_mse(a, b, mask=None):
    """Mean squared difference per map, averaged over (selected) proposals."""
    a = _as_batched(a)
    b = _as_batched(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"attention shapes differ: {a.data.shape} vs {b.data.shape}")
    d = ad.sub(a, b)
    per_map = ad.tmean(ad.tmean(ad.mul(d, d), axis=2), axis=1)
    n = a.data.shape[0]
    if mask is None:
        w = np.full(n, 1.0 / n)
    else:
        mask = np.asarray(mask, dtype=np.float64).reshape(-1)
        if len(mask) != n:
            raise ShapeError(f"mask covers {len(mask)} proposals, maps cover {n}")
        total = mask.sum()
        if total <= 0:
            return Tensor(np.zeros((), dtype=a.data.dtype))
        w = mask / total
    return ad.tsum(ad.mul(per_map, w.astype(a.data.dtype)))


def iw_casd_loss(attn, attn_flip, attn_scale, teacher, mask=None):
    """Distance of each image-wise source to the teacher, summed over sources.

    ``attn_flip`` is realigned before comparison; ``mask`` selects which
    proposals enter the per-proposal average.
    """
    parts = [
        _masked_map_mse(teacher, attn, mask),
        _masked_map_mse(teacher, flip_map(attn_flip), mask),
        _masked_map_mse(teacher, attn_scale, mask),
    ]
    return ad.add(ad.add(parts[0], parts[1]), parts[2])


def lw_casd_loss(block_attns, teacher, mask=None):
    """Distance of each block's attention to the layer-wise teacher."""
    if not block_attns:
        raise ContractError("need at least one block attention map")
    acc = _masked_map_mse(teacher, block_attns[0], mask)
    for a in block_attns[1:]:
        acc = ad.add(acc, _masked_map_mse(teacher, a, mask))
    return acc


def _np_sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ia_drop_cells(attn_values, q):
    """Cells strictly above each map's q-quantile: the ones IA zeroes."""
    a = np.asarray(attn_values, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    thr = np.quantile(a.reshape(len(a), -1), q, axis=1)
    return a > thr[:, None, None]


def inverted_attention(pooled, rng, p=0.5, q=0.8):
    """Recompute attention after zeroing the strongest cells of some proposals.

    With probability ``p`` per proposal, every feature channel is zeroed at
    the spatial cells where the proposal's attention exceeds its q-quantile;
    the attention map is then recomputed from the masked features.  The mask
    itself is a constant: gradients flow only through surviving cells.
    """
    if pooled.data.ndim != 4:
        raise ShapeError(f"expected pooled features [N,L,H,W], got {pooled.data.shape}")
    n = pooled.data.shape[0]
    attn_values = _np_sigmoid(pooled.data.mean(axis=1))
    drop = ia_drop_cells(attn_values, q)
    apply = rng.random(n) < p
    keep = ~(drop & apply[:, None, None])
    mask = Tensor(keep[:, None, :, :].astype(pooled.data.dtype))
    return proposal_attention(ad.mul(pooled, mask))


def prediction_consistency(mats, mask=None):
    """Mean pairwise Jensen-Shannon divergence of per-proposal class columns."""
    if len(mats) < 2:
        raise ContractError("prediction consistency needs at least two score matrices")
    shape = mats[0].data.shape
    for m in mats[1:]:
        if m.data.shape != shape:
            raise ShapeError(f"score matrices must share a shape, {m.data.shape} vs {shape}")
    n = shape[1]
    if mask is None:
        w = np.full(n, 1.0 / n)
    else:
        mask = np.asarray(mask, dtype=np.float64).reshape(-1)
        total = mask.sum()
        if total <= 0:
            return Tensor(np.zeros((), dtype=mats[0].data.dtype))
        w = mask / total
    w = w.astype(mats[0].data.dtype)

    def _kl_cols(p, m):
        # sum_c p * (log p - log m) per column
        ratio = ad.sub(ad.log(ad.clip(p, JS_EPS, 1.0)), ad.log(ad.clip(m, JS_EPS, 1.0)))
        return ad.tsum(ad.mul(p, ratio), axis=0)

    total = None
    pairs = 0
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            m = ad.mul(ad.add(mats[i], mats[j]), 0.5)
            js_cols = ad.mul(ad.add(_kl_cols(mats[i], m), _kl_cols(mats[j], m)), 0.5)
            term = ad.tsum(ad.mul(js_cols, w))
            total = term if total is None else ad.add(total, term)
            pairs += 1
    return ad.mul(total, 1.0 / pairs)


def attention_consistency(maps, mask=None):
    """Mean pairwise squared distance between aligned attention maps."""
    if len(maps) < 2:
        raise ContractError("attention consistency needs at least two maps")
    total = None
    pairs = 0
    for i in range(len(maps)):
        for j in range(i + 1, len(maps)):
            term = _masked_map_mse(maps[i], maps[j], mask)
            total = term if total is None else ad.add(total, term)
            pairs += 1
    return ad.mul(total, 1.0 / pairs)


def write_pgm(path, values):
    """8-bit binary PGM of a [H, W] map; values are clipped to [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"PGM dump expects a 2-d map, got {arr.shape}")
    gray = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())
