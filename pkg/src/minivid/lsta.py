"""Recurrent attention cell: a ConvLSTM with spatial attention on its input
and an output gate biased by a pooled view of the memory.

The attention logits mix a convolution of [input ; hidden] with the
(log-space) previous attention map, so attended regions track smoothly
over time. The output gate receives an additive channel bias chosen by
soft selection over a small bank of learned prototype vectors, driven by
the spatial average of the memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Parameter, layer_rng
from .tensor import Tensor

ATTENTION_LOG_EPS = 1e-8


@dataclass
class LstaState:
    """Per-sequence recurrent state.

    memory/hidden: (B, C_m, H, W); attention: (B, 1, H, W), a valid spatial
    distribution (non-negative, sums to one per sample).
    """

    memory: Tensor
    hidden: Tensor
    attention: Tensor


class LstaCell:
    """Parameters for one cell; shared read-only across sequence evaluations."""

    def __init__(self, in_channels: int, memory_size: int = 16, pooling_classes: int = 8,
                 attention_decay: float = 1.0, *, seed: int, name: str = "lsta",
                 dtype=np.float64):
        mix = in_channels + memory_size
        self.in_channels = in_channels
        self.memory_size = memory_size
        self.pooling_classes = pooling_classes
        self.attention_decay = attention_decay
        self.conv_i = Conv2d(mix, memory_size, seed=seed, name=f"{name}.conv_i", dtype=dtype)
        self.conv_f = Conv2d(mix, memory_size, seed=seed, name=f"{name}.conv_f", dtype=dtype)
        self.conv_g = Conv2d(mix, memory_size, seed=seed, name=f"{name}.conv_g", dtype=dtype)
        self.conv_o = Conv2d(mix, memory_size, seed=seed, name=f"{name}.conv_o", dtype=dtype)
        self.conv_attn = Conv2d(mix, 1, seed=seed, name=f"{name}.conv_attn", dtype=dtype)
        rng = layer_rng(seed, f"{name}.prototypes")
        proto = rng.standard_normal((pooling_classes, memory_size)) / np.sqrt(memory_size)
        self.prototypes = Parameter(proto.astype(dtype))

    def initial_state(self, batch: int, height: int, width: int, dtype=None) -> LstaState:
        """All-zero memory and hidden, uniform attention."""
        dt = dtype or self.conv_i.weight.dtype
        uniform = np.full((batch, 1, height, width), 1.0 / (height * width), dtype=dt)
        return LstaState(
            memory=T.zeros((batch, self.memory_size, height, width), dtype=dt),
            hidden=T.zeros((batch, self.memory_size, height, width), dtype=dt),
            attention=Tensor(uniform),
        )

    def parameters(self):
        out = []
        for key in ("conv_i", "conv_f", "conv_g", "conv_o", "conv_attn"):
            out.extend((f"{key}.{k}", p) for k, p in getattr(self, key).parameters())
        out.append(("prototypes", self.prototypes))
        return out


def attend(x: Tensor, state: LstaState, cell: LstaCell) -> Tensor:
    """Spatial attention map over the current input: softmax of conv logits
    plus the decayed log of the previous map. Always a valid distribution."""
    if x.shape[2:] != state.hidden.shape[2:]:
        raise ValueError(
            f"attend: spatial shape {x.shape[2:]} does not match state {state.hidden.shape[2:]}"
        )
    if x.shape[1] != cell.in_channels:
        raise ValueError(f"attend: expected {cell.in_channels} input channels, got {x.shape[1]}")
    logits = cell.conv_attn(T.concat([x, state.hidden], axis=1))
    lam = cell.attention_decay
    if lam != 0.0:
        logits = logits + (state.attention + ATTENTION_LOG_EPS).log() * lam
    return T.softmax_spatial(logits)


def memory_gate_bias(cell: LstaCell, memory: Tensor) -> Tensor:
    """Output-gate channel bias from the memory's spatial average only.

    Soft selection over prototype vectors: weights are a softmax of
    prototype responses to the pooled memory; the bias is the matching
    convex combination of prototypes. (B, C_m, H, W) -> (B, C_m).
    """
    pooled = T.avg_pool_spatial(memory)                       # (B, C_m)
    select = T.softmax_vector(T.linear(pooled, cell.prototypes))
    return T.matmul(select, cell.prototypes)                  # (B, C_m)


def cell_step(x: Tensor, state: LstaState, cell: LstaCell):
    """One recurrent step. Returns (new_state, hidden output)."""
    if x.ndim != 4:
        raise ValueError(f"cell_step expects (B,C,H,W), got {x.shape}")
    a = attend(x, state, cell)
    x_att = T.expand(a, x.shape) * x
    z = T.concat([x_att, state.hidden], axis=1)
    i = cell.conv_i(z).sigmoid()
    f = cell.conv_f(z).sigmoid()
    g = cell.conv_g(z).tanh()
    c_new = f * state.memory + i * g
    bias = memory_gate_bias(cell, c_new)
    b, cm = bias.shape
    bias_map = T.expand(bias.reshape(b, cm, 1, 1), c_new.shape)
    o = (cell.conv_o(z) + bias_map).sigmoid()
    h_new = o * c_new.tanh()
    return LstaState(memory=c_new, hidden=h_new, attention=a), h_new


def aggregate(x: Tensor, cell: LstaCell) -> Tensor:
    """Roll the cell over a feature sequence and spatially pool the last hidden.

    Accepts (T, C, H, W) for one sequence -> (C_m,) or (B, T, C, H, W)
    batched -> (B, C_m). Starts from the zero state with uniform attention.
    """
    single = x.ndim == 4
    if single:
        t_len = x.shape[0]
        seq = x.reshape(1, *x.shape)
    elif x.ndim == 5:
        t_len = x.shape[1]
        seq = x
    else:
        raise ValueError(f"aggregate expects (T,C,H,W) or (B,T,C,H,W), got {x.shape}")
    if t_len < 1:
        raise ValueError("aggregate: empty sequence")
    b, _, _, h, w = seq.shape
    state = cell.initial_state(b, h, w, dtype=seq.dtype)
    hidden = None
    for t in range(t_len):
        state, hidden = cell_step(seq[:, t], state, cell)
    d_act = T.avg_pool_spatial(hidden)                        # (B, C_m)
    return d_act.reshape(d_act.shape[1]) if single else d_act
