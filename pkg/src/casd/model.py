"""The detector: backbone + proposal encoder + MIL head, plus checkpoints.

A checkpoint is a zip of TNSR blobs (one per parameter and per momentum
buffer) with a JSON meta entry carrying the iteration counter and the full
training config plus its hash.  Entries use a fixed timestamp so identical
states produce identical archives.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig, config_hash, parse_config, serialize_config
from .errors import ContractError, FormatError
from .mil import MILHead
from .tnsr import dumps_tensor, loads_tensor
from .vision import Backbone, ProposalEncoder, roi_pool_batch

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class ViewOutput:
    """Everything the losses need from one forward pass of one image view."""

    blocks: list      # backbone maps, one Tensor[L,Hq,Wq] per block
    pooled: dict      # block index (1-based) -> Tensor[N,L,R,R]; -1 is the last block
    vecs: object      # Tensor[N, D]
    x: object         # Tensor[C, N] base-branch scores
    x_k: list         # K Tensors[(C+1), N]
    offsets: object   # Tensor[4, N] or None
    img_hw: tuple
    boxes: np.ndarray


class Detector:
    def __init__(self, num_classes, cfg: TrainConfig, rng):
        if num_classes < 1:
            raise ContractError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.roi_resolution = cfg.roi_resolution
        self.backbone = Backbone(cfg.backbone_widths, in_channels=3, rng=rng)
        flat = cfg.backbone_widths[-1] * cfg.roi_resolution ** 2
        self.encoder = ProposalEncoder(flat, cfg.fc_dim, rng)
        self.head = MILHead(cfg.fc_dim, num_classes, cfg.k, rng, with_regression=True)

    def named_parameters(self):
        return (
            self.backbone.named_parameters()
            + self.encoder.named_parameters()
            + self.head.named_parameters()
        )

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def forward_view(self, image, boxes, need_offsets=False, pool_blocks=()):
        """Run one image view through the whole net.

        ``pool_blocks`` asks for extra RoI pooling over specific backbone
        blocks (1-based indices) used by layer-wise attention.
        """
        img_t = Tensor(np.ascontiguousarray(image))
        blocks = self.backbone(img_t)
        hw = (image.shape[1], image.shape[2])
        out_hw = (self.roi_resolution, self.roi_resolution)
        pooled = {-1: roi_pool_batch(blocks[-1], boxes, hw, out_hw)}
        for q in pool_blocks:
            if not 1 <= q <= len(blocks):
                raise ContractError(f"block index {q} out of range 1..{len(blocks)}")
            if q == len(blocks):
                pooled[q] = pooled[-1]
            else:
                pooled[q] = roi_pool_batch(blocks[q - 1], boxes, hw, out_hw)
        vecs = self.encoder(pooled[-1])
        return ViewOutput(
            blocks=blocks,
            pooled=pooled,
            vecs=vecs,
            x=self.head.wsddn(vecs),
            x_k=self.head.refinement(vecs),
            offsets=self.head.offsets(vecs) if need_offsets else None,
            img_hw=hw,
            boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        )


def save_checkpoint(path, model, iteration, cfg):
    named = model.named_parameters()
    meta = {
        "iteration": int(iteration),
        "config_hash": config_hash(cfg),
        "config": serialize_config(cfg),
        "num_classes": model.num_classes,
        "params": [name for name, _ in named],
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        def _write(name, blob):
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            zf.writestr(info, blob)

        _write("meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for name, p in named:
            _write(f"params/{name}.tnsr", dumps_tensor(p.data))
            vel = p._velocity if p._velocity is not None else np.zeros_like(p.data)
            _write(f"momentum/{name}.tnsr", dumps_tensor(vel))


def load_checkpoint(path):
    """Rebuild (model, iteration, cfg) from a checkpoint archive."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as e:
        raise FormatError(f"cannot open checkpoint {path}: {e}") from None
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise FormatError(f"checkpoint {path} has no meta.json") from None
        cfg = parse_config(meta["config"])
        if config_hash(cfg) != meta["config_hash"]:
            raise FormatError(f"checkpoint {path}: config hash mismatch")
        model = Detector(int(meta["num_classes"]), cfg, rng=np.random.default_rng(0))
        named = dict(model.named_parameters())
        if set(meta["params"]) != set(named):
            raise FormatError(f"checkpoint {path}: parameter names do not match this model")
        for name, p in named.items():
            data = loads_tensor(zf.read(f"params/{name}.tnsr"), name=f"params/{name}")
            if data.shape != p.data.shape:
                raise FormatError(f"checkpoint {path}: {name} has shape {data.shape}, expected {p.data.shape}")
            p.data = data
            p._velocity = loads_tensor(zf.read(f"momentum/{name}.tnsr"), name=f"momentum/{name}")
    return model, int(meta["iteration"]), cfg
