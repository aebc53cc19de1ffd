"""Dense float64 tensors with reverse-mode differentiation.

Every primitive builds a graph node holding its inputs and a closure that maps
the output gradient to input gradients. ``Tensor.backward`` replays the nodes
reachable from a scalar root in exact reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_seq = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class DeterminismError(RuntimeError):
    """A function expected to be deterministic returned different values."""


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def count_macs():
    """Tally scalar multiply-accumulates performed by matmul and conv2d.

    Yields a dict whose ``"macs"`` entry holds the running total.
    """
    prev = getattr(_state, "macs", None)
    tally = {"macs": 0}
    _state.macs = tally
    try:
        yield tally
    finally:
        _state.macs = prev


def _add_macs(n):
    tally = getattr(_state, "macs", None)
    if tally is not None:
        tally["macs"] += int(n)


class RngState:
    """Seeded random stream; identical seed and call sequence give identical draws."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def normal(self, loc, scale, size=None):
        self.counter += 1
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        self.counter += 1
        return self._gen.permutation(n)

    def spawn(self, offset: int) -> "RngState":
        """Independent child stream keyed on ``offset``."""
        return RngState((self.seed * 0x9E3779B97F4A7C15 + offset + 1) & 0xFFFFFFFFFFFFFFFF)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_seq", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every leaf that requires grad.

        Gradients accumulate across calls; clear them with :func:`zero_grads`.
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        order = tape(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def tape(root):
    """Nodes reachable from ``root`` in creation order (inputs precede outputs)."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def zero_grads(params):
    for p in params:
        p.grad = None


def _make(data, parents, backward, op):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float):
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU in its tanh form, ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), backward, "gelu")


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axes, keepdims), 1.0 / n)


# -------------------------------------------------------------- shape ops


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


# ------------------------------------------------------------------- matmul


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes.

    A 2-D right operand is applied to every row of ``a`` with one GEMM.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim == 2:
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        _add_macs(a2.shape[0] * a2.shape[1] * b.shape[1])

        def backward(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward, "matmul")

    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _add_macs(int(np.prod(batch, dtype=np.int64)) * m * k * n)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- softmax


def softmax(a, axis=-1):
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax axis {axis} invalid for shape {a.shape}")
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _make(y, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), backward, "log_softmax")


def cross_entropy(logits, labels, axis=-1):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``axis`` is the class axis; ``labels`` has the logits' shape minus that axis.
    """
    labels = np.asarray(labels)
    axis = axis % logits.ndim
    n_classes = logits.shape[axis]
    if labels.shape != logits.shape[:axis] + logits.shape[axis + 1:]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"cross_entropy: label out of range [0, {n_classes})")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logp = z - lse
    idx = np.expand_dims(labels.astype(np.intp), axis)
    picked = np.take_along_axis(logp, idx, axis=axis)
    count = labels.size
    loss = -picked.sum() / count

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, idx, 1.0, axis=axis)
        return ((grad - onehot) * (g / count),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# ------------------------------------------------------------- normalisation


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine params {gamma.shape} for features {d}")
    return _make(out, (x, gamma, beta), backward, "layernorm")


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels, momentum=0.1):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.momentum = momentum


def batchnorm2d(x, gamma, beta, state, training=True, eps=1e-5):
    """Per-channel normalisation of a ``B x C x H x W`` tensor."""
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects B x C x H x W, got {x.shape}")
    axes = (0, 2, 3)
    C = x.shape[1]
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n == 0:
            raise ContractError("batchnorm2d: degenerate batch with no samples per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(1, C, 1, 1)
        var = (xc * xc).mean(axis=axes)
        m = state.momentum
        state.mean = (1 - m) * state.mean + m * mu
        state.var = (1 - m) * state.var + m * var
    else:
        xc = x.data - state.mean.reshape(1, C, 1, 1)
        var = state.var
    inv = (1.0 / np.sqrt(var + eps)).reshape(1, C, 1, 1)
    xhat = xc * inv
    out = xhat * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)

    def backward(g):
        gxhat = g * gamma.data.reshape(1, C, 1, 1)
        if training:
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------- conv2d


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``[B x] C_in x H x W`` input with ``C_out x C_in x k x k`` weights."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks, input {x.shape}, weight {weight.shape}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = weight.shape
    if C != Ci:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {Ci} ({x.shape} vs {weight.shape})")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be positive and padding non-negative")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # cols: (B*Ho*Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(Co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    _add_macs(B * Co * Ci * kh * kw * Ho * Wo)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if stride == kh == kw and padding == 0:
                # non-overlapping windows: col2im is a pure reshape
                gx = np.zeros(x.shape)
                gx[:, :, :Ho * kh, :Wo * kw] = gcols.reshape(B, Ho, Wo, C, kh, kw) \
                    .transpose(0, 3, 1, 4, 2, 5).reshape(B, C, Ho * kh, Wo * kw)
            else:
                gcols = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
                gxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(out, parents, backward, "conv2d")
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


# -------------------------------------------------------------- checking


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Returns one max relative error per parameter, with relative error
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_entries`` caps how many elements
    of each parameter are probed (chosen by ``rng``); ``None`` probes all.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    zero_grads(params)
    loss = f()
    second = f()
    if loss.data.tobytes() != second.data.tobytes():
        raise DeterminismError("grad_check: two evaluations of f differ")
    loss.backward()
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = []
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        errors.append(worst)
    zero_grads(params)
    return errors


# ------------------------------------------------------------- text dump


def dump_tensor(t) -> str:
    """``shape: d0 d1 ...`` header then row-major decimal values."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    head = "shape:" + "".join(f" {d}" for d in data.shape)
    return head + "\n" + " ".join(repr(float(v)) for v in data.reshape(-1).tolist()) + "\n"


def parse_tensor(text: str) -> np.ndarray:
    lines = text.strip("\n").split("\n", 1)
    if not lines[0].startswith("shape:"):
        raise ContractError(f"tensor dump: expected 'shape:' header, got {lines[0][:40]!r}")
    shape = tuple(int(s) for s in lines[0][6:].split())
    body = lines[1] if len(lines) > 1 else ""
    values = np.array([float(v) for v in body.split()], dtype=DTYPE)
    if values.size != int(np.prod(shape, dtype=np.int64)):
        raise ContractError(f"tensor dump: {values.size} values for shape {shape}")
    return values.reshape(shape)
