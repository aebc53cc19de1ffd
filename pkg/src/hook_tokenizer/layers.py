"""Parameterised building blocks shared by the tokenizer, backbone and heads."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix=""):
        """Non-trainable arrays (batchnorm running statistics)."""
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, T.BatchNormState):
                yield f"{full}.mean", value, "mean"
                yield f"{full}.var", value, "var"
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, owner, attr in self.named_buffers():
            state[name] = getattr(owner, attr).copy()
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = {name: (owner, attr) for name, owner, attr in self.named_buffers()}
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=T.DTYPE)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()
        for name, (owner, attr) in buffers.items():
            setattr(owner, attr, np.asarray(state[name], dtype=T.DTYPE).copy())

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


def uniform_init(rng, shape, fan_in):
    b = math.sqrt(1.0 / fan_in)
    return T.parameter(rng.uniform(-b, b, shape))


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, bias=True):
        self.weight = uniform_init(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = T.parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))
        self.stats = T.BatchNormState(channels, momentum)
        self.eps = eps

    def __call__(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.stats, self.training, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = T.parameter(np.ones(dim))
        self.beta = T.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    """Linear, GELU, Linear."""

    def __init__(self, rng, d_in, hidden, d_out):
        self.fc1 = Linear(rng, d_in, hidden)
        self.fc2 = Linear(rng, hidden, d_out)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x, heads):
    """``(..., L, heads*dh)`` -> ``(..., heads, L, dh)``."""
    *lead, L, D = x.shape
    x = T.reshape(x, (*lead, L, heads, D // heads))
    n = len(lead)
    return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x):
    *lead, h, L, dh = x.shape
    n = len(lead)
    x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(x, (*lead, L, h * dh))


def attention(q, k, v):
    """Scaled dot-product attention; returns ``(output, weights)``."""
    q = T.scale(q, 1.0 / math.sqrt(q.shape[-1]))
    scores = T.matmul(q, T.swapaxes(k, -1, -2))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


class SelfAttention(Module):
    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim, bias=False)  # a key bias shifts every score of a query equally
        self.v = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)
        self.last_weights = None

    def __call__(self, x):
        h = self.heads
        out, w = attention(split_heads(self.q(x), h), split_heads(self.k(x), h), split_heads(self.v(x), h))
        self.last_weights = w.data
        return self.proj(merge_heads(out))


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))`` with a 4x hidden MLP."""

    def __init__(self, rng, dim, heads, mlp_ratio=4):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, mlp_ratio * dim, dim)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
