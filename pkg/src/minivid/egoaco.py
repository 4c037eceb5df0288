"""Clip descriptors and the shared multi-task classifier.

Three descriptors summarize a feature sequence: an action descriptor from
the recurrent attention cell, a scene context descriptor from independent
per-frame spatial attention, and an active object descriptor from
temporally coherent attention. Verb scores read the action descriptor,
noun scores the object descriptor, and action scores the concatenation;
action scores additionally feed back as learned linear biases on the verb
and noun classifiers. The same classifier wiring serves the gate-shift
network, with its single pooled feature standing in for all three roles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lsta
from . import tensor as T
from .gsm import GsnConfig, GsnModel, ConvBlock
from .nn import Conv2d, Linear, Parameter, collect_parameters
from .tensor import Tensor

COHERENCE_LOG_EPS = 1e-8


@dataclass
class DescriptorSet:
    """Batched clip descriptors: d_act (B, C_m), d_ctx and d_obj (B, C_f)."""

    d_act: Tensor
    d_ctx: Tensor
    d_obj: Tensor

    def action_input(self) -> Tensor:
        return T.concat([self.d_act, self.d_ctx, self.d_obj], axis=1)


class MultiTaskHead:
    """Verb/noun/action classifiers with action-score biasing.

    s_a = W_a . f_a + b_a
    s_v = W_v . f_v + B_v . s_a + b_v
    s_n = W_n . f_n + B_n . s_a + b_n

    The bias maps B_v, B_n start at zero, so predictions begin decoupled.
    """

    def __init__(self, verb_in: int, noun_in: int, action_in: int,
                 verbs: int, nouns: int, actions: int, *, seed: int, name: str,
                 dtype=np.float64):
        self.sizes = (verbs, nouns, actions)
        self.w_verb = Linear(verb_in, verbs, seed=seed, name=f"{name}.w_verb", dtype=dtype)
        self.w_noun = Linear(noun_in, nouns, seed=seed, name=f"{name}.w_noun", dtype=dtype)
        self.w_action = Linear(action_in, actions, seed=seed, name=f"{name}.w_action", dtype=dtype)
        self.bias_verb = Parameter(np.zeros((verbs, actions), dtype=dtype))
        self.bias_noun = Parameter(np.zeros((nouns, actions), dtype=dtype))

    def apply(self, f_verb: Tensor, f_noun: Tensor, f_action: Tensor):
        s_a = self.w_action(f_action)
        s_v = self.w_verb(f_verb) + T.linear(s_a, self.bias_verb)
        s_n = self.w_noun(f_noun) + T.linear(s_a, self.bias_noun)
        return s_v, s_n, s_a

    def parameters(self):
        out = []
        for key in ("w_verb", "w_noun", "w_action"):
            out.extend((f"{key}.{k}", p) for k, p in getattr(self, key).parameters())
        out.append(("bias_verb", self.bias_verb))
        out.append(("bias_noun", self.bias_noun))
        return out


def classify(d: DescriptorSet, head: MultiTaskHead):
    """Scores (verb, noun, action) for a descriptor set."""
    return head.apply(d.d_act, d.d_obj, d.action_input())


def _attention_pool(a: Tensor, x: Tensor) -> Tensor:
    """Attention-weighted spatial sum: (B,1,H,W) x (B,C,H,W) -> (B,C)."""
    return (T.expand(a, x.shape) * x).sum(axis=(-2, -1))


def encode_context(x: Tensor, attn_conv: Conv2d) -> Tensor:
    """Scene context: independent per-frame attention, temporal average.

    x: (B, T, C, H, W) -> (B, C). Invariant under any permutation of the
    frame axis.
    """
    if x.ndim != 5:
        raise ValueError(f"encode_context expects (B,T,C,H,W), got {x.shape}")
    b, t, c, h, w = x.shape
    if t < 1:
        raise ValueError("encode_context: empty sequence")
    flat = x.reshape(b * t, c, h, w)
    a = T.softmax_spatial(attn_conv(flat))
    f = _attention_pool(a, flat)                      # (B*T, C)
    return T.mean(f.reshape(b, t, c), axis=1)


def encode_object(x: Tensor, attn_conv: Conv2d, return_attention: bool = False):
    """Active object: attention coupled to the running mean of past maps.

    Frame t's logits average the current convolution response with the log
    of the mean of maps 1..t-1, i.e. a_t is the normalized geometric mean
    of the frame response and the history. A constant input sequence is a
    fixed point: every map equals the single-frame map, so the descriptor
    matches the one-frame result.
    """
    if x.ndim != 5:
        raise ValueError(f"encode_object expects (B,T,C,H,W), got {x.shape}")
    b, t_len, c, h, w = x.shape
    if t_len < 1:
        raise ValueError("encode_object: empty sequence")
    feats = []
    maps = []
    history = None                                    # running mean of past maps
    for t in range(t_len):
        frame = x[:, t]
        logits = attn_conv(frame)
        if history is not None:
            logits = (logits + (history + COHERENCE_LOG_EPS).log()) * 0.5
        a = T.softmax_spatial(logits)
        maps.append(a)
        feats.append(_attention_pool(a, frame))
        if history is None:
            history = a
        else:
            history = (history * float(t) + a) * (1.0 / (t + 1))
    stacked = T.concat([f.reshape(b, 1, c) for f in feats], axis=1)
    d_obj = T.mean(stacked, axis=1)
    if return_attention:
        return d_obj, maps
    return d_obj


def multitask_loss(scores, labels) -> Tensor:
    """Equal-weight sum of verb, noun, and action cross-entropies.

    scores: (s_v, s_n, s_a) batched score tensors; labels: (verb, noun,
    action) integer arrays. Out-of-range labels are rejected.
    """
    s_v, s_n, s_a = scores
    v, n, a = labels
    return T.cross_entropy(s_v, v) + T.cross_entropy(s_n, n) + T.cross_entropy(s_a, a)


@dataclass
class EgoAcoConfig:
    """Desk-scale defaults; memory/pooling sizes scale the full-size recipe."""

    backbone: GsnConfig = None
    memory_size: int = 16
    pooling_classes: int = 8
    dropout: float = 0.5
    dtype: object = np.float64

    def __post_init__(self):
        if self.backbone is None:
            self.backbone = GsnConfig(use_gsm=False, dtype=self.dtype)
        self.backbone.dtype = self.dtype


class EgoAcoModel:
    """Trunk + three cloned top blocks feeding the three descriptor paths.

    The cloned tops share one init stream, so they start bitwise identical
    and only diverge once training updates them independently.
    """

    HEAD_KEYS = ("top_act", "top_ctx", "top_obj")

    def __init__(self, cfg: EgoAcoConfig, seed: int):
        cfg.backbone.validate()
        self.cfg = cfg
        self.seed = seed
        dt = cfg.dtype
        bb = cfg.backbone
        self.stem = Conv2d(3, bb.stem_channels, kernel_size=3, stride=2, padding=0,
                           seed=seed, name="trunk.stem", dtype=dt)
        chans = list(bb.block_channels)
        self.trunk_blocks = []
        prev = bb.stem_channels
        for i, ch in enumerate(chans[:-1]):
            self.trunk_blocks.append(ConvBlock(prev, ch, seed=seed, name=f"trunk.blocks.{i}",
                                            use_gsm=bb.use_gsm, dtype=dt))
            prev = ch
        top_ch = chans[-1]
        # same init stream name for all three -> literal clones at build time
        self.tops = {key: ConvBlock(prev, top_ch, seed=seed, name="top.shared",
                                 use_gsm=bb.use_gsm, dtype=dt)
                     for key in self.HEAD_KEYS}
        self.feature_channels = top_ch
        self.lsta = lsta.LstaCell(top_ch, memory_size=cfg.memory_size,
                                  pooling_classes=cfg.pooling_classes,
                                  seed=seed, name="lsta", dtype=dt)
        self.ctx_attn = Conv2d(top_ch, 1, seed=seed, name="ctx_attn", dtype=dt)
        self.obj_attn = Conv2d(top_ch, 1, seed=seed, name="obj_attn", dtype=dt)
        self.head = MultiTaskHead(
            verb_in=cfg.memory_size, noun_in=top_ch,
            action_in=cfg.memory_size + 2 * top_ch,
            verbs=bb.verbs, nouns=bb.nouns, actions=bb.actions,
            seed=seed, name="classifier", dtype=dt)

    def min_input_size(self) -> int:
        need = 1 + 2 * len(self.trunk_blocks) + 2
        return (need - 1) * 2 + 3

    def trunk_features(self, clip: Tensor) -> Tensor:
        if clip.ndim != 5 or clip.shape[2] != 3:
            raise ValueError(f"expected (B,T,3,H,W) clip, got {clip.shape}")
        b, t = clip.shape[0], clip.shape[1]
        x = clip.reshape(b * t, 3, clip.shape[3], clip.shape[4])
        x = self.stem(x)
        for block in self.trunk_blocks:
            x = block(x, b, t)
        return x

    def descriptors(self, clip: Tensor) -> DescriptorSet:
        b, t = clip.shape[0], clip.shape[1]
        trunk = self.trunk_features(clip)

        def top(key):
            y = self.tops[key](trunk, b, t)
            _, c, h, w = y.shape
            return y.reshape(b, t, c, h, w)

        d_act = lsta.aggregate(top("top_act"), self.lsta)
        d_ctx = encode_context(top("top_ctx"), self.ctx_attn)
        d_obj = encode_object(top("top_obj"), self.obj_attn)
        return DescriptorSet(d_act=d_act, d_ctx=d_ctx, d_obj=d_obj)

    def forward(self, clip: Tensor, training: bool = False, rng=None):
        d = self.descriptors(clip)
        p = self.cfg.dropout
        d = DescriptorSet(
            d_act=T.dropout(d.d_act, p, rng, training),
            d_ctx=T.dropout(d.d_ctx, p, rng, training),
            d_obj=T.dropout(d.d_obj, p, rng, training),
        )
        return classify(d, self.head)

    def parameters(self) -> dict:
        named = [("trunk.stem", self.stem)]
        named += [(f"trunk.blocks.{i}", blk) for i, blk in enumerate(self.trunk_blocks)]
        named += [(key, self.tops[key]) for key in self.HEAD_KEYS]
        named += [("lsta", self.lsta), ("ctx_attn", self.ctx_attn),
                  ("obj_attn", self.obj_attn), ("classifier", self.head)]
        return collect_parameters(named)


def build_egoaco(cfg: EgoAcoConfig, seed: int) -> EgoAcoModel:
    """Deterministic EgoACO construction (same-seed builds are bitwise equal)."""
    return EgoAcoModel(cfg, seed)
