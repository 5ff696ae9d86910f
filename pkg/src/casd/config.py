"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .errors import ContractError, FormatError

VALID_TRANSFORMS = ("orig", "flip", "scale")
VALID_REGULARIZERS = ("none", "pred_consistency", "attn_consistency")

# element type of each tuple-valued field
_TUPLE_ELEM = {
    "decay_at_iter": int,
    "transforms": str,
    "lw_blocks": int,
    "train_scales": float,
    "eval_scales": float,
    "backbone_widths": int,
}


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.05
    gamma: float = 0.1
    k: int = 2
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_factor: float = 10.0
    decay_at_iter: tuple = (2000,)
    max_iters: int = 3000
    nms_thr: float = 0.3
    transforms: tuple = ("orig", "flip", "scale")
    enable_iw: bool = True
    enable_lw: bool = True
    enable_ia: bool = True
    enable_psa: bool = True
    enable_reg: bool = True
    baseline_regularizer: str = "none"
    lw_blocks: tuple = (2, 3, 4)
    ia_p: float = 0.5
    ia_q: float = 0.8
    seed: int = 0
    train_scales: tuple = (0.5, 0.75, 1.25, 1.5)
    eval_scales: tuple = (0.5, 0.75, 1.25, 1.5)
    backbone_widths: tuple = (16, 32, 64, 64)
    roi_resolution: int = 7
    fc_dim: int = 128
    log_every: int = 50

    def validate(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.k < 1:
            raise ContractError("k (refinement branches) must be >= 1")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ContractError("lr and lr_decay_factor must be positive")
        if self.max_iters < 1:
            raise ContractError("max_iters must be >= 1")
        if not 0 < self.nms_thr < 1:
            raise ContractError("nms_thr must lie in (0, 1)")
        if "orig" not in self.transforms:
            raise ContractError("the transform set must include 'orig'")
        for t in self.transforms:
            if t not in VALID_TRANSFORMS:
                raise ContractError(f"unknown transform '{t}'")
        if self.baseline_regularizer not in VALID_REGULARIZERS:
            raise ContractError(
                f"baseline_regularizer must be one of {VALID_REGULARIZERS}, got '{self.baseline_regularizer}'"
            )
        if self.enable_iw or self.baseline_regularizer != "none":
            if not {"flip", "scale"}.issubset(self.transforms):
                raise ContractError(
                    "image-wise distillation and consistency regularizers need the 'flip' and 'scale' transforms"
                )
        if not self.lw_blocks or any(not 1 <= b <= len(self.backbone_widths) for b in self.lw_blocks):
            raise ContractError(f"lw_blocks must name blocks in 1..{len(self.backbone_widths)}")
        if not 0 <= self.ia_p <= 1 or not 0 < self.ia_q < 1:
            raise ContractError("ia_p must lie in [0, 1] and ia_q in (0, 1)")
        if any(s <= 0 for s in self.train_scales) or any(s <= 0 for s in self.eval_scales):
            raise ContractError("scales must be positive")
        if not self.backbone_widths or any(w < 1 for w in self.backbone_widths):
            raise ContractError("backbone_widths must be positive")
        if self.roi_resolution < 1 or self.fc_dim < 1:
            raise ContractError("roi_resolution and fc_dim must be >= 1")
        if self.log_every < 1:
            raise ContractError("log_every must be >= 1")
        return self


def _format_value(value):
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(name, text, target_type):
    text = text.strip()
    try:
        if target_type is tuple:
            elem = _TUPLE_ELEM[name]
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(elem(p) for p in parts)
        if target_type is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        return target_type(text)
    except (ValueError, KeyError):
        raise FormatError(f"config key '{name}': cannot parse value '{text}'") from None


def serialize_config(cfg):
    """Canonical text form: sorted ``key = value`` lines."""
    lines = []
    for f in sorted(dataclasses.fields(TrainConfig), key=lambda f: f.name):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def parse_config(text):
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value', got '{raw.strip()}'")
        name, _, value = line.partition("=")
        name = name.strip()
        if name not in types:
            raise FormatError(f"config line {lineno}: unknown key '{name}'")
        if name in values:
            raise FormatError(f"config line {lineno}: duplicate key '{name}'")
        values[name] = _parse_value(name, value, types[name])
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def load_config(path):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise FormatError(f"cannot read config file {path}: {e}") from None
    return parse_config(text)


def replace(cfg, **kwargs):
    """Copy a config with some fields overridden (revalidated)."""
    out = dataclasses.replace(cfg, **kwargs)
    out.validate()
    return out
