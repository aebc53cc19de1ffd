"""Homogeneous visual tokenizer built on a small numpy autodiff engine."""

from .config import ModelConfig, TrainConfig, tiny_config
from .model import HookModel
from .tensor import RngState, Tensor

__all__ = ["HookModel", "ModelConfig", "RngState", "Tensor", "TrainConfig", "tiny_config"]
__version__ = "0.1.0"
