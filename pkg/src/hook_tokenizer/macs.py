"""Analytic multiply-accumulate and parameter counts.

Convention: only multiply-adds inside matrix products and convolutions count.
Bias additions, normalisation, softmax, activations and pooling count as zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .opm import stage_widths


@dataclass
class MacsReport:
    macs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(self.macs.values())

    @property
    def total_params(self):
        return sum(self.params.values())

    def format(self) -> str:
        lines = ["module,macs,params"]
        for name in self.macs:
            lines.append(f"{name},{self.macs[name]},{self.params.get(name, 0)}")
        lines.append(f"total,{self.total},{self.total_params}")
        return "\n".join(lines) + "\n"


def block_macs(seq_len, dim, mlp_ratio=4):
    """One pre-norm transformer block over a sequence of ``seq_len`` tokens."""
    return 4 * seq_len * dim * dim + 2 * seq_len * seq_len * dim + 2 * mlp_ratio * seq_len * dim * dim


def block_params(dim, mlp_ratio=4):
    hidden = mlp_ratio * dim
    return 4 * dim + 4 * dim * dim + 3 * dim + (dim * hidden + hidden) + (hidden * dim + dim)


def cross_macs(n_queries, q_dim, n_seeds, kv_dim, cross_dim):
    return (n_queries * q_dim * cross_dim + 2 * n_seeds * kv_dim * cross_dim
            + 2 * n_queries * n_seeds * cross_dim)


def cross_params(q_dim, kv_dim, cross_dim):
    return q_dim * cross_dim + 2 * kv_dim * cross_dim + 2 * cross_dim


def mlp_macs(n, d_in, hidden, d_out):
    return n * d_in * hidden + n * hidden * d_out


def mlp_params(d_in, hidden, d_out):
    return d_in * hidden + hidden + hidden * d_out + d_out


def count_macs(config: ModelConfig, input_shape=None) -> MacsReport:
    """Per-module MACs and parameters for one forward pass of a single image."""
    config.validate()
    if input_shape is None:
        input_shape = (3, config.image_size, config.image_size)
    _, H, W = input_shape
    o, v, bb = config.opm, config.ovm, config.backbone
    rep = MacsReport()

    conv_m = conv_p = 0
    h, w, c_in = H, W, 3
    for width in stage_widths(o):
        h, w = h // 2, w // 2
        conv_m += width * c_in * 4 * h * w
        conv_p += width * c_in * 4 + 2 * width
        for _ in range(o.convs_per_stage):
            conv_m += width * width * 9 * h * w
            conv_p += width * width * 9 + 2 * width
        c_in = width
    conv_m += o.dim * c_in * h * w
    conv_p += o.dim * c_in + o.dim
    rows, cols = h, w
    M = rows * cols
    rep.macs["opm.seed_extract"] = conv_m
    rep.params["opm.seed_extract"] = conv_p
    if o.pos_embed:
        rep.macs["opm.pos_embed"] = 0
        rep.params["opm.pos_embed"] = M * o.dim

    for i, kind in enumerate(o.attention_layers()):
        if kind == "L":
            n_win = o.window_divisor ** 2
            rep.macs[f"opm.layer{i}.local"] = n_win * block_macs(M // n_win, o.dim)
            rep.params[f"opm.layer{i}.local"] = block_params(o.dim)
        else:
            rep.macs[f"opm.layer{i}.global"] = block_macs(M, o.dim)
            rep.params[f"opm.layer{i}.global"] = block_params(o.dim)

    N, D, cd, d = v.tokens, v.out_dim, v.cross_dim, o.dim
    ovm_m = cross_macs(N, D, M, d, cd) + mlp_macs(N, cd, D, D)
    ovm_p = N * D + cross_params(D, d, cd) + mlp_params(cd, D, D)
    for _ in range(v.layers - 1):
        ovm_m += block_macs(N, D) + cross_macs(N, D, M, d, cd) + mlp_macs(N, cd, D, D)
        ovm_p += block_params(D) + cross_params(D, d, cd) + mlp_params(cd, D, D)
    rep.macs["ovm"] = ovm_m
    rep.params["ovm"] = ovm_p

    rep.macs["backbone"] = bb.layers * block_macs(N, bb.dim)
    rep.params["backbone"] = bb.layers * block_params(bb.dim)

    C = config.head.classes
    if config.head.task == "classify":
        rep.macs["head"] = D * C
    else:
        rep.macs["head.dense_reconstruct"] = M * N * D
        rep.macs["head"] = M * D * C + C * (H * rows * cols + H * cols * W)
    rep.params["head"] = D * C + C
    if config.head.task == "segment" and config.head.norm:
        rep.params["head"] += 2 * D
    return rep


def instrumented_macs(model, input_shape=None) -> int:
    """Multiply-adds tallied by the tensor engine during one real forward pass."""
    cfg = model.config
    if input_shape is None:
        input_shape = (3, cfg.image_size, cfg.image_size)
    x = T.Tensor(np.zeros((1,) + tuple(input_shape)))
    was_training = model.training
    model.eval()
    with T.no_grad(), T.count_macs() as tally:
        model(x)
    model.train(was_training)
    return tally["macs"]


def token_marginal_macs(config: ModelConfig, n_from: int, n_to: int, input_shape=None) -> int:
    """Closed-form change in MACs when the token count moves from ``n_from`` to ``n_to``.

    Token-dependent terms: the query projection, cross-attention scores/mixing
    and projection MLP in vectorization; every backbone block (linear in N
    except the ``2 N^2 D`` attention term); and the dense reconstruction.
    """
    o, v, bb = config.opm, config.ovm, config.backbone
    if input_shape is None:
        input_shape = (3, config.image_size, config.image_size)
    M = (input_shape[1] // o.seed_size) * (input_shape[2] // o.seed_size)
    D, cd = v.out_dim, v.cross_dim
    dn = n_to - n_from
    dn2 = n_to * n_to - n_from * n_from
    per_token_ovm = D * cd + 2 * M * cd + cd * D + D * D
    per_token_ovm += (v.layers - 1) * (12 * D * D + D * cd + 2 * M * cd + cd * D + D * D)
    quad_ovm = (v.layers - 1) * 2 * D
    per_token_bb = bb.layers * 12 * bb.dim * bb.dim
    quad_bb = bb.layers * 2 * bb.dim
    out = dn * (per_token_ovm + per_token_bb) + dn2 * (quad_ovm + quad_bb)
    if config.head.task == "segment":
        out += dn * M * D
    return out
