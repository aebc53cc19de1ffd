"""The full model: tokenizer (perception + vectorization), backbone and task head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .heads import Backbone, ClassifierHead, SegmentationHead, dense_reconstruct
from .layers import Module
from .opm import ObjectPerception, SeedGrid
from .ovm import ObjectVectorization
from .tensor import DimensionError, RngState, Tensor


@dataclass
class Tokenization:
    grid: SeedGrid
    tokens: Tensor
    attention: Tensor


class HookTokenizer(Module):
    """``t = V(P(I), q)``: images to N tokens plus the N x M attention map."""

    def __init__(self, config: ModelConfig, rng: RngState):
        self.opm = ObjectPerception(config.opm, rng, config.image_size)
        self.ovm = ObjectVectorization(config.ovm, config.opm.dim, rng)

    def __call__(self, images: Tensor) -> Tokenization:
        grid = self.opm(images)
        tokens, amap = self.ovm(grid)
        return Tokenization(grid, tokens, amap)


class HookModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = RngState(seed)
        self.tokenizer = HookTokenizer(config, rng)
        self.backbone = Backbone(config.backbone, rng)
        if config.head.task == "classify":
            self.head = ClassifierHead(rng, config.backbone.dim, config.head.classes)
        else:
            self.head = SegmentationHead(rng, config.backbone.dim, config.head.classes, config.head.norm)

    def tokenize(self, images) -> Tokenization:
        return self.tokenizer(_as_batch(images))

    def __call__(self, images) -> Tensor:
        """Class logits ``B x C`` or per-pixel logits ``B x C x H x W``."""
        images = _as_batch(images)
        tok = self.tokenizer(images)
        feats = self.backbone(tok.tokens)
        if self.config.head.task == "classify":
            return self.head(feats)
        spatial = dense_reconstruct(feats, tok.attention, self.config.head.seed_normalize)
        H, W = images.shape[-2:]
        return self.head(spatial, tok.grid.rows, tok.grid.cols, H, W)

    def predict(self, images) -> np.ndarray:
        with T.no_grad():
            logits = self(images).data
        return logits.argmax(axis=1)


def _as_batch(images):
    images = T.as_tensor(images)
    if images.ndim == 3:
        images = T.reshape(images, (1,) + images.shape)
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected B x 3 x H x W images, got {images.shape}")
    return images
