"""Image handling, box geometry, the conv backbone and RoI feature pooling.

Boxes are continuous ``(x1, y1, x2, y2)`` corner coordinates in image space.
Image transforms (flip, bilinear rescale) are plain array work applied before
any graph is built; everything from the backbone onwards is differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

MIN_SCALED_SIZE = 16


@dataclass
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass
class Image:
    pixels: Tensor  # [3, h, w], values in [0, 1]
    image_id: str = ""

    @property
    def height(self):
        return self.pixels.data.shape[1]

    @property
    def width(self):
        return self.pixels.data.shape[2]


def flip_image(image):
    """Mirror an image horizontally."""
    flipped = np.flip(image.pixels.data, axis=-1).copy()
    return Image(Tensor(flipped), image.image_id)


def flip_box(box, image_w):
    """Box coordinates after a horizontal flip of a width-``image_w`` image."""
    return BBox(image_w - box.x2, box.y1, image_w - box.x1, box.y2)


def flip_boxes(boxes, image_w):
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, 0] = image_w - boxes[:, 2]
    out[:, 2] = image_w - boxes[:, 0]
    return out


def flip_map(attn):
    """Realign a spatial map computed on a flipped image (differentiable)."""
    return ad.reverse(attn, axis=-1)


def _bilinear_resize(data, oh, ow):
    c, h, w = data.shape
    ys = np.clip((np.arange(oh) + 0.5) * (h / oh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * (w / ow) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    d = data.astype(np.float64)
    top = d[:, y0][:, :, x0] * (1 - wx) + d[:, y0][:, :, x1] * wx
    bot = d[:, y1][:, :, x0] * (1 - wx) + d[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(data.dtype)


def scale_image_array(pixels, s):
    """Bilinear rescale of a [3,h,w] array by factor ``s``."""
    oh = int(round(pixels.shape[1] * s))
    ow = int(round(pixels.shape[2] * s))
    if oh < MIN_SCALED_SIZE or ow < MIN_SCALED_SIZE:
        raise ShapeError(f"scaled image {oh}x{ow} is below the {MIN_SCALED_SIZE}px minimum")
    return _bilinear_resize(pixels, oh, ow)


def scale_image(image, s):
    """Bilinear rescale by factor ``s`` (half-pixel-center sampling)."""
    return Image(Tensor(scale_image_array(image.pixels.data, s)), image.image_id)


def scale_box(box, s):
    return BBox(box.x1 * s, box.y1 * s, box.x2 * s, box.y2 * s)


def scale_boxes(boxes, s):
    return np.asarray(boxes, dtype=np.float64) * s


class Linear:
    """Fully connected layer; weight is [in, out] so x @ w + b."""

    def __init__(self, in_dim, out_dim, rng, name="linear"):
        std = math.sqrt(2.0 / in_dim)
        dt = ad.default_dtype()
        self.w = Tensor(rng.normal(0.0, std, (in_dim, out_dim)), requires_grad=True, dtype=dt)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True, dtype=dt)
        self.name = name

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def named_parameters(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class ConvBlock:
    """3x3 conv (pad 1) + relu + 2x2 max pool: halves the spatial size."""

    def __init__(self, cin, cout, rng, name="block"):
        std = math.sqrt(2.0 / (cin * 9))
        dt = ad.default_dtype()
        self.w = Tensor(rng.normal(0.0, std, (cout, cin, 3, 3)), requires_grad=True, dtype=dt)
        self.b = Tensor(np.zeros(cout), requires_grad=True, dtype=dt)
        self.name = name

    def __call__(self, x):
        return ad.maxpool2d(ad.relu(ad.conv2d(x, self.w, self.b, stride=1, pad=1)))

    def named_parameters(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class Backbone:
    """Stack of conv blocks; block q output has stride 2^(q+1) wrt the input."""

    def __init__(self, widths=(16, 32, 64, 64), in_channels=3, rng=None):
        rng = rng or np.random.default_rng(0)
        self.blocks = []
        cin = in_channels
        for q, cout in enumerate(widths):
            self.blocks.append(ConvBlock(cin, cout, rng, name=f"backbone.{q}"))
            cin = cout

    def __call__(self, image_tensor):
        """Forward an image tensor; returns every block's output map."""
        maps = []
        x = image_tensor
        for block in self.blocks:
            x = block(x)
            maps.append(x)
        return maps

    def named_parameters(self):
        out = []
        for block in self.blocks:
            out.extend(block.named_parameters())
        return out


def _bin_edges(f1, f2, nbins, limit):
    # start = floor of the bin's left edge, end = ceil of its right edge,
    # clamped so every bin keeps at least one cell inside the map.
    t = np.arange(nbins + 1) / nbins
    pos = f1[:, None] + (f2 - f1)[:, None] * t
    start = np.floor(pos[:, :-1]).astype(np.int64)
    end = np.ceil(pos[:, 1:]).astype(np.int64)
    start = np.clip(start, 0, limit - 1)
    end = np.clip(end, 1, limit)
    end = np.maximum(end, start + 1)
    return start, end


def _roi_cell_index(boxes, img_hw, feat_hw, out_hw):
    """Flat feature-cell indices per (proposal, output bin), padded per bin.

    Padding repeats a bin's last cell, which is harmless under max.
    Returns an int array [N, oh*ow, max_cells].
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    hf, wf = feat_hw
    oh, ow = out_hw
    sy = img_hw[0] / hf
    sx = img_hw[1] / wf
    rs, re = _bin_edges(boxes[:, 1] / sy, boxes[:, 3] / sy, oh, hf)
    cs, ce = _bin_edges(boxes[:, 0] / sx, boxes[:, 2] / sx, ow, wf)
    mr = int((re - rs).max())
    mc = int((ce - cs).max())
    rows = np.minimum(rs[:, :, None] + np.arange(mr), re[:, :, None] - 1)
    cols = np.minimum(cs[:, :, None] + np.arange(mc), ce[:, :, None] - 1)
    cells = rows[:, :, None, :, None] * wf + cols[:, None, :, None, :]
    return cells.reshape(len(boxes), oh * ow, mr * mc)


def roi_pool_batch(feature, boxes, img_hw, out_hw=(7, 7)):
    """Max-pool a feature map over every box into a fixed grid.

    feature: Tensor[L, Hf, Wf]; boxes: array [N, 4] in image coordinates.
    Returns Tensor[N, L, oh, ow].  Gradient flows to each bin's argmax cell.
    """
    if feature.data.ndim != 3:
        raise ShapeError(f"roi_pool expects feature[L,Hf,Wf], got {feature.data.shape}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if n == 0:
        raise ShapeError("roi_pool needs at least one box")
    l, hf, wf = feature.data.shape
    oh, ow = out_hw
    idx = _roi_cell_index(boxes, img_hw, (hf, wf), out_hw)
    fflat = feature.data.reshape(l, hf * wf)
    vals = fflat[:, idx]                           # [L, N, oh*ow, cells]
    am = None
    if vals.shape[3] == 1:
        pooled = vals[..., 0]
    elif ad._GRAD_ENABLED and feature.requires_grad:
        # one heavy pass: argmax, then gather the winners
        am = vals.argmax(axis=3)
        pooled = np.take_along_axis(vals, am[..., None], axis=3)[..., 0]
    else:
        pooled = vals.max(axis=3)
    out = ad._result(pooled.transpose(1, 0, 2).reshape(n, l, oh, ow), (feature,))
    if out.requires_grad:
        if am is None:
            am = np.zeros(vals.shape[:3], dtype=np.int64)
        chosen = idx[np.arange(n)[None, :, None], np.arange(oh * ow)[None, None, :], am]
        flat_idx = (np.arange(l)[:, None] * (hf * wf) + chosen.reshape(l, -1)).ravel()

        def _bw():
            g = out.grad.transpose(1, 0, 2, 3).reshape(l, -1)
            acc = np.bincount(flat_idx, weights=g.ravel(), minlength=l * hf * wf)
            feature._accum(acc.reshape(l, hf, wf).astype(feature.data.dtype))

        out._backward = _bw
    return out


def roi_pool(feature, box, img_hw, out_hw=(7, 7)):
    """Single-box RoI max pooling; returns Tensor[L, oh, ow]."""
    arr = box.as_array() if isinstance(box, BBox) else np.asarray(box, dtype=np.float64)
    batched = roi_pool_batch(feature, arr[None, :], img_hw, out_hw)
    l = feature.data.shape[0]
    return ad.reshape(batched, (l,) + tuple(out_hw))


class ProposalEncoder:
    """Flatten pooled RoI features and embed them with two relu FC layers."""

    def __init__(self, flat_dim, feat_dim, rng):
        self.fc1 = Linear(flat_dim, feat_dim, rng, name="encoder.fc1")
        self.fc2 = Linear(feat_dim, feat_dim, rng, name="encoder.fc2")

    def __call__(self, pooled):
        n = pooled.data.shape[0]
        flat = ad.reshape(pooled, (n, -1))
        if flat.data.shape[1] != self.fc1.w.data.shape[0]:
            raise ShapeError(
                f"pooled features flatten to {flat.data.shape[1]}, encoder expects {self.fc1.w.data.shape[0]}"
            )
        return ad.relu(self.fc2(ad.relu(self.fc1(flat))))

    def named_parameters(self):
        return self.fc1.named_parameters() + self.fc2.named_parameters()


def proposal_vectors(pooled, encoder):
    """Contract-level alias: pooled RoI features -> per-proposal vectors."""
    return encoder(pooled)
