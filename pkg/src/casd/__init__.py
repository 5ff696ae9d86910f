"""Weakly supervised shape detection trained with attention self-distillation.

A small numpy-backed autodiff engine (``casd.autodiff``), a tiny
convolutional detector with a two-branch MIL head and refinement cascade
(``casd.vision``, ``casd.mil``), comprehensive attention distillation losses
(``casd.distill``), a synthetic shapes dataset (``casd.data``) and the
training/evaluation/ablation drivers (``casd.train``, ``casd.ablate``).
"""

from .autodiff import Tensor, no_grad, use_dtype
from .config import TrainConfig, load_config, replace
from .errors import ContractError, FormatError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "use_dtype",
    "TrainConfig",
    "load_config",
    "replace",
    "ContractError",
    "FormatError",
    "ShapeError",
    "__version__",
]
