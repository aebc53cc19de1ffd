"""Object perception: split an image into seeds, then relate seeds by attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import OpmConfig
from .layers import BatchNorm2d, Conv2d, Module, TransformerBlock
from .tensor import DimensionError, RngState, Tensor


@dataclass
class SeedGrid:
    """Seed features laid out row-major over a ``rows x cols`` grid.

    ``features`` is ``B x M x d`` (batched) or ``M x d``.
    """

    features: Tensor
    rows: int
    cols: int
    seed_size: int

    @property
    def count(self):
        return self.rows * self.cols

    @property
    def dim(self):
        return self.features.shape[-1]

    def rect(self, i):
        """Pixel rectangle ``(top, left, bottom, right)`` of seed ``i`` (half-open)."""
        r, c = divmod(i, self.cols)
        s = self.seed_size
        return r * s, c * s, (r + 1) * s, (c + 1) * s

    def with_features(self, features):
        return SeedGrid(features, self.rows, self.cols, self.seed_size)


def stage_widths(config: OpmConfig):
    """Channel width of each stride-2 stage; widths double towards ``dim / 2``."""
    n = int(np.log2(config.seed_size))
    return [max(config.dim // 2 ** (n - i), 4) for i in range(n)]


class SeedExtractor(Module):
    """``log2(seed_size)`` stages of conv(k2, s2)-BN-ReLU plus conv(k3)-BN-ReLU, then a 1x1 projection."""

    def __init__(self, config: OpmConfig, rng: RngState):
        self.seed_size = config.seed_size
        self.stages = []
        c_in = 3
        for width in stage_widths(config):
            # convs feeding batchnorm carry no bias: the normalisation would cancel it
            stage = [Conv2d(rng, c_in, width, 2, stride=2, bias=False), BatchNorm2d(width)]
            for _ in range(config.convs_per_stage):
                stage += [Conv2d(rng, width, width, 3, stride=1, padding=1, bias=False), BatchNorm2d(width)]
            self.stages.append(_Stage(stage))
            c_in = width
        self.proj = Conv2d(rng, c_in, config.dim, 1)

    def __call__(self, images: Tensor) -> SeedGrid:
        B, C, H, W = images.shape
        s = self.seed_size
        if H % s or W % s:
            raise DimensionError(f"image extents {H}x{W} not divisible by seed_size {s}")
        x = images
        for stage in self.stages:
            x = stage(x)
        x = self.proj(x)
        _, d, rows, cols = x.shape
        feats = T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, rows * cols, d))
        return SeedGrid(feats, rows, cols, s)


class _Stage(Module):
    def __init__(self, layers):
        self.layers = layers

    def __call__(self, x):
        for conv, bn in zip(self.layers[::2], self.layers[1::2]):
            x = T.relu(bn(conv(x)))
        return x


def window_partition(feats, rows, cols, divisor):
    """``B x M x d`` -> ``(B * divisor^2) x (M / divisor^2) x d`` windows."""
    if rows % divisor or cols % divisor:
        raise DimensionError(f"seed grid {rows}x{cols} not divisible by window divisor {divisor}")
    B, _, d = feats.shape
    wr, wc = rows // divisor, cols // divisor
    x = T.reshape(feats, (B, divisor, wr, divisor, wc, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * divisor * divisor, wr * wc, d))


def window_merge(windows, rows, cols, divisor):
    d = windows.shape[-1]
    wr, wc = rows // divisor, cols // divisor
    B = windows.shape[0] // (divisor * divisor)
    x = T.reshape(windows, (B, divisor, divisor, wr, wc, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, rows * cols, d))


class LocalAttention(Module):
    """Transformer block applied independently inside each of ``divisor x divisor`` windows."""

    def __init__(self, config: OpmConfig, rng: RngState):
        self.divisor = config.window_divisor
        self.block = TransformerBlock(rng, config.dim, config.heads)

    def __call__(self, grid: SeedGrid) -> SeedGrid:
        win = window_partition(grid.features, grid.rows, grid.cols, self.divisor)
        out = window_merge(self.block(win), grid.rows, grid.cols, self.divisor)
        return grid.with_features(out)


class GlobalAttention(Module):
    """Transformer block over all seeds."""

    def __init__(self, config: OpmConfig, rng: RngState):
        self.block = TransformerBlock(rng, config.dim, config.heads)

    def __call__(self, grid: SeedGrid) -> SeedGrid:
        return grid.with_features(self.block(grid.features))


class ObjectPerception(Module):
    """Seed extraction, optional position embedding, then the configured attention layers."""

    def __init__(self, config: OpmConfig, rng: RngState, image_size: int):
        config.validate()
        self.config = config
        self.extract = SeedExtractor(config, rng)
        side = image_size // config.seed_size
        self.grid_shape = (side, side)
        self.pos_embed = T.parameter(rng.normal(0.0, 0.02, (side * side, config.dim))) if config.pos_embed else None
        self.layers = [
            LocalAttention(config, rng) if kind == "L" else GlobalAttention(config, rng)
            for kind in config.attention_layers()
        ]

    def seeds(self, images: Tensor) -> SeedGrid:
        grid = self.extract(images)
        if self.pos_embed is not None:
            if (grid.rows, grid.cols) != self.grid_shape:
                raise DimensionError(
                    f"position embedding built for a {self.grid_shape} grid, got {(grid.rows, grid.cols)}")
            grid = grid.with_features(grid.features + self.pos_embed)
        return grid

    def __call__(self, images: Tensor) -> SeedGrid:
        grid = self.seeds(images)
        for layer in self.layers:
            grid = layer(grid)
        return grid


def _batched(image):
    image = T.as_tensor(image)
    if image.ndim == 3:
        return T.reshape(image, (1,) + image.shape), True
    return image, False


def _unbatch(grid, squeeze):
    if squeeze:
        return grid.with_features(T.reshape(grid.features, grid.features.shape[1:]))
    return grid


def seed_extract(image, module: ObjectPerception) -> SeedGrid:
    """Run only the conv stack (no attention, no position terms)."""
    x, squeeze = _batched(image)
    return _unbatch(module.extract(x), squeeze)


def opm_forward(image, module: ObjectPerception) -> SeedGrid:
    x, squeeze = _batched(image)
    return _unbatch(module(x), squeeze)
