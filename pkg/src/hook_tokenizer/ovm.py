"""Object vectorization: learnable queries cross-attend over seeds to form N tokens."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import OvmConfig
from .layers import Linear, Mlp, Module, TransformerBlock, attention, merge_heads, split_heads
from .opm import SeedGrid
from .tensor import ContractError, RngState, Tensor


class CrossAttention(Module):
    """Queries in ``q_dim`` attend over keys/values in ``kv_dim``; both projected to ``cross_dim``.

    Returns the concatenated head outputs and the head-averaged attention map.
    """

    def __init__(self, rng, q_dim, kv_dim, cross_dim, heads):
        self.heads = heads
        self.q = Linear(rng, q_dim, cross_dim)
        self.k = Linear(rng, kv_dim, cross_dim, bias=False)
        self.v = Linear(rng, kv_dim, cross_dim)
        self.head_maps = None

    def __call__(self, queries: Tensor, seeds: Tensor):
        if seeds.shape[-2] == 0:
            raise ContractError("cross-attention over an empty seed set")
        h = self.heads
        out, w = attention(split_heads(self.q(queries), h), split_heads(self.k(seeds), h),
                           split_heads(self.v(seeds), h))
        self.head_maps = w.data
        return merge_heads(out), T.mean(w, axis=-3)


class ObjectVectorization(Module):
    def __init__(self, config: OvmConfig, seed_dim: int, rng: RngState):
        config.validate()
        self.config = config
        self.queries = T.parameter(rng.normal(0.0, 0.02, (config.tokens, config.out_dim)))
        self.cross = CrossAttention(rng, config.out_dim, seed_dim, config.cross_dim, config.heads)
        self.mlp = Mlp(rng, config.cross_dim, config.out_dim, config.out_dim)
        self.refine = [_Refine(config, seed_dim, rng) for _ in range(config.layers - 1)]

    def __call__(self, grid: SeedGrid):
        """Return ``(tokens B x N x D, attention map B x N x M)``."""
        pre, amap = self.cross(self.queries, grid.features)
        tokens = self.mlp(pre)
        for layer in self.refine:
            tokens, amap = layer(tokens, grid.features)
        return tokens, amap


class _Refine(Module):
    """Token self-attention, then another cross-attention back to the seeds."""

    def __init__(self, config, seed_dim, rng):
        self.self_attn = TransformerBlock(rng, config.out_dim, config.heads if config.out_dim % config.heads == 0 else 1)
        self.cross = CrossAttention(rng, config.out_dim, seed_dim, config.cross_dim, config.heads)
        self.mlp = Mlp(rng, config.cross_dim, config.out_dim, config.out_dim)

    def __call__(self, tokens, seeds):
        tokens = self.self_attn(tokens)
        pre, amap = self.cross(tokens, seeds)
        return tokens + self.mlp(pre), amap


def cross_attention(queries, grid: SeedGrid, module: ObjectVectorization):
    return module.cross(queries, grid.features)


def project_mlp(pre_tokens, module: ObjectVectorization):
    return module.mlp(pre_tokens)


def ovm_forward(grid: SeedGrid, module: ObjectVectorization):
    feats = grid.features
    squeeze = feats.ndim == 2
    if squeeze:
        grid = grid.with_features(T.reshape(feats, (1,) + feats.shape))
    tokens, amap = module(grid)
    if squeeze:
        tokens = T.reshape(tokens, tokens.shape[1:])
        amap = T.reshape(amap, amap.shape[1:])
    return tokens, amap


def row_sums(amap) -> np.ndarray:
    data = amap.data if isinstance(amap, Tensor) else np.asarray(amap)
    return data.sum(axis=-1)
