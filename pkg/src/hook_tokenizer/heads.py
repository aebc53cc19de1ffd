"""Transformer backbone plus the classification and dense (segmentation) heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import BackboneConfig
from .layers import LayerNorm, Linear, Module, TransformerBlock
from .tensor import DimensionError, RngState, Tensor


class Backbone(Module):
    """Stack of pre-norm transformer blocks; zero layers is the identity."""

    def __init__(self, config: BackboneConfig, rng: RngState):
        config.validate()
        self.dim = config.dim
        self.blocks = [TransformerBlock(rng, config.dim, config.heads) for _ in range(config.layers)]

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"backbone expects token dim {self.dim}, got {tokens.shape[-1]}")
        for block in self.blocks:
            tokens = block(tokens)
        return tokens


class ClassifierHead(Module):
    """Mean over tokens, then an affine map to class logits."""

    def __init__(self, rng, dim, n_classes):
        self.fc = Linear(rng, dim, n_classes)

    def __call__(self, tokens):
        out = self.fc(T.mean(tokens, axis=-2, keepdims=True))
        return T.reshape(out, out.shape[:-2] + out.shape[-1:])


def dense_reconstruct(tokens: Tensor, amap: Tensor, seed_normalize: bool = False) -> Tensor:
    """Spatial features ``A^T t``: each seed gets the attention-weighted mix of tokens.

    With ``seed_normalize`` each column of ``A`` is first divided by its sum, so
    every spatial feature is a convex combination of the tokens. Raw ``A`` rows
    sum to one over all seeds, which leaves columns (and features) ~N/M in scale.
    """
    if amap.shape[-2] != tokens.shape[-2]:
        raise DimensionError(f"attention map {amap.shape} does not match tokens {tokens.shape}")
    if seed_normalize:
        amap = T.div(amap, T.sum_(amap, axis=-2, keepdims=True))
    return T.matmul(T.swapaxes(amap, -1, -2), tokens)


def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Interpolation weights ``out_size x in_size`` with half-pixel centres (align_corners=False)."""
    mat = np.zeros((out_size, in_size))
    ratio = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        mat[i, i0] += 1.0 - lam
        mat[i, i1] += lam
    return mat


def upsample_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Resize the last two axes of ``x`` to ``height x width``."""
    uh = Tensor(bilinear_matrix(height, x.shape[-2]))
    uw = Tensor(bilinear_matrix(width, x.shape[-1]).T.copy())
    return T.matmul(T.matmul(uh, x), uw)


class SegmentationHead(Module):
    """Optional layernorm, per-position linear classifier, then bilinear upsampling."""

    def __init__(self, rng, dim, n_classes, norm: bool = False):
        self.norm = LayerNorm(dim) if norm else None
        self.fc = Linear(rng, dim, n_classes)

    def __call__(self, spatial: Tensor, rows: int, cols: int, height: int, width: int) -> Tensor:
        if spatial.shape[-2] != rows * cols:
            raise DimensionError(f"{spatial.shape[-2]} spatial tokens for a {rows}x{cols} grid")
        if self.norm is not None:
            spatial = self.norm(spatial)
        logits = self.fc(spatial)                      # B x M x C
        B, _, C = logits.shape
        grid = T.transpose(T.reshape(logits, (B, rows, cols, C)), (0, 3, 1, 2))
        return upsample_bilinear(grid, height, width)
