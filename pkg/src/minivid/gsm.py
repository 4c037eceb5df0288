"""Gate-shift temporal mixing and the gate-shift network (GSN) built on it.

A gate-shift layer splits a (B, T, C, H, W) feature volume into a learned
gated part and its residual complement, shifts the gated part one step
forward in time for the first channel group and one step backward for the
second (zero padding at the clip boundary), and adds the residual back.
With zero gate weights the layer is an exact identity, so a fresh GSN
computes the same function as the plain per-frame backbone it wraps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import AffineNorm, Conv2d, collect_parameters
from .tensor import Tensor

GROUP_COUNT = 2


class GsmLayer:
    """Grouped spatial gating for one feature width.

    One 3x3 single-plane convolution per channel group produces the gating
    plane (same spatial size as the input); weights and bias start at zero
    so the module is born as an identity.
    """

    def __init__(self, channels: int, *, seed: int, name: str, dtype=np.float64):
        if channels % GROUP_COUNT != 0:
            raise ValueError(f"gate-shift layer needs even channels, got {channels}")
        self.channels = channels
        self.group_count = GROUP_COUNT
        self.gate = Conv2d(channels, GROUP_COUNT, kernel_size=3, stride=1, padding=1,
                           groups=GROUP_COUNT, seed=seed, name=f"{name}.gate",
                           dtype=dtype, zero_init=True)

    def parameters(self):
        return [(f"gate.{k}", p) for k, p in self.gate.parameters()]


def spatial_gate(y: Tensor, layer: GsmLayer):
    """Split features into (gated, residual) with gated + residual == y bitwise.

    The gate for each channel group is tanh of its gating plane, broadcast
    over the group's channels. The returned gated part is the exact float
    complement of the residual (within one ulp of gate * y), so the two
    halves always reassemble to the input.
    """
    if y.ndim != 5:
        raise ValueError(f"spatial_gate expects (B,T,C,H,W), got {y.shape}")
    b, t, c, h, w = y.shape
    if c != layer.channels:
        raise ValueError(
            f"spatial_gate: channel dimension is {c}, layer expects {layer.channels}"
        )
    flat = y.reshape(b * t, c, h, w)
    planes = layer.gate(flat).tanh()                    # (B*T, 2, H, W)
    half = c // 2
    parts = []
    for g in range(GROUP_COUNT):
        plane = planes[:, g:g + 1]
        chans = flat[:, g * half:(g + 1) * half]
        parts.append(T.expand(plane, (b * t, half, h, w)) * chans)
    gated_raw = T.concat(parts, axis=1).reshape(b, t, c, h, w)
    residual = y - gated_raw
    gated = y - residual                                # exact complement of residual
    return gated, residual


def group_shift(x: Tensor) -> Tensor:
    """Shift the first channel half forward in time, the second backward.

    out[t] = in[t-1] for group 1 (out[0] = 0); out[t] = in[t+1] for
    group 2 (out[T-1] = 0). Linear, so the adjoint is the opposite shift.
    """
    if x.ndim != 5:
        raise ValueError(f"group_shift expects (B,T,C,H,W), got {x.shape}")
    c = x.shape[2]
    if c % 2 != 0:
        raise ValueError(f"group_shift needs an even channel count, got {c}")
    half = c // 2
    out_data = np.zeros_like(x.data)
    out_data[:, 1:, :half] = x.data[:, :-1, :half]
    out_data[:, :-1, half:] = x.data[:, 1:, half:]
    out = Tensor(out_data)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :-1, :half] = g[:, 1:, :half]
        gx[:, 1:, half:] = g[:, :-1, half:]
        x._accumulate(gx)

    return out._record((x,), bwd)


def _shift_adjoint(g: np.ndarray, half: int) -> np.ndarray:
    out = np.zeros_like(g)
    out[:, :-1, :half] = g[:, 1:, :half]
    out[:, 1:, half:] = g[:, :-1, half:]
    return out


def _gate_shift_combine(y: Tensor, planes: Tensor) -> Tensor:
    """Fused tanh-gate / complement-split / shift / fuse.

    Forward follows the same float sequence as the composed
    spatial_gate -> group_shift -> add path, collapsed into one node so
    training avoids a chain of full-size intermediates.
    """
    b, t_len, c, h, w = y.shape
    half = c // 2
    bt = b * t_len
    flat_y = y.data.reshape(bt, c, h, w)
    t = np.tanh(planes.data)                           # (B*T, 2, H, W)
    gated0 = np.empty_like(flat_y)
    gated0[:, :half] = t[:, 0:1] * flat_y[:, :half]
    gated0[:, half:] = t[:, 1:2] * flat_y[:, half:]
    gated0 = gated0.reshape(y.shape)
    residual = y.data - gated0
    gated = y.data - residual                          # exact complement
    out_data = np.zeros_like(gated)
    out_data[:, 1:, :half] = gated[:, :-1, :half]
    out_data[:, :-1, half:] = gated[:, 1:, half:]
    out_data += residual
    out = Tensor(out_data)

    def bwd(g):
        # out = shift(t*y) + y - t*y, so d(out) routes through D = adj(g) - g
        d = _shift_adjoint(g, half) - g
        dflat = d.reshape(bt, c, h, w)
        if y.requires_grad:
            gy = g.reshape(bt, c, h, w).copy()
            gy[:, :half] += t[:, 0:1] * dflat[:, :half]
            gy[:, half:] += t[:, 1:2] * dflat[:, half:]
            y._accumulate(gy.reshape(y.shape))
        if planes.requires_grad:
            gt = np.concatenate([
                (flat_y[:, :half] * dflat[:, :half]).sum(axis=1, keepdims=True),
                (flat_y[:, half:] * dflat[:, half:]).sum(axis=1, keepdims=True),
            ], axis=1)
            planes._accumulate(gt * (1.0 - t * t))

    return out._record((y, planes), bwd)


def gsm_forward(y: Tensor, layer: GsmLayer) -> Tensor:
    """Gate, shift the gated features in time, and fuse with the residual.

    Equivalent (bitwise) to group_shift(gated) + residual with the two
    halves from :func:`spatial_gate`.
    """
    if y.ndim != 5:
        raise ValueError(f"gsm_forward expects (B,T,C,H,W), got {y.shape}")
    b, t_len, c, h, w = y.shape
    if c != layer.channels:
        raise ValueError(
            f"gsm_forward: channel dimension is {c}, layer expects {layer.channels}"
        )
    flat = y.reshape(b * t_len, c, h, w)
    planes = layer.gate(flat)
    return _gate_shift_combine(y, planes)


@dataclass
class GsnConfig:
    """Desk-scale backbone description.

    Convolutions are 3x3 valid (no padding) so constant inputs produce
    spatially constant feature maps; the stem has stride 2. All channel
    counts must be even so the shift groups split cleanly.
    """

    stem_channels: int = 8
    block_channels: tuple = (8, 16, 16)
    verbs: int = 5
    nouns: int = 3
    actions: int = 15
    use_gsm: bool = True
    dropout: float = 0.5
    dtype: object = np.float64

    def validate(self):
        for label, ch in [("stem", self.stem_channels)] + [
            (f"block {i}", c) for i, c in enumerate(self.block_channels)
        ]:
            if ch % 2 != 0:
                raise ValueError(f"channel count for {label} must be even, got {ch}")
        if not self.block_channels:
            raise ValueError("need at least one block")


class ConvBlock:
    """conv -> affine norm -> relu, optionally followed by gate-shift."""

    def __init__(self, in_ch, out_ch, *, seed, name, use_gsm, dtype):
        self.conv = Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=0,
                           seed=seed, name=f"{name}.conv", dtype=dtype)
        self.norm = AffineNorm(out_ch, dtype=dtype)
        self.gsm = GsmLayer(out_ch, seed=seed, name=f"{name}.gsm", dtype=dtype) if use_gsm else None
        self.out_channels = out_ch

    def __call__(self, x: Tensor, b: int, t: int) -> Tensor:
        y = self.norm(self.conv(x)).relu()
        if self.gsm is None:
            return y
        _, c, h, w = y.shape
        y5 = y.reshape(b, t, c, h, w)
        return gsm_forward(y5, self.gsm).reshape(b * t, c, h, w)

    def parameters(self):
        named = [("conv", self.conv), ("norm", self.norm)]
        if self.gsm is not None:
            named.append(("gsm", self.gsm))
        out = []
        for prefix, layer in named:
            out.extend((f"{prefix}.{k}", p) for k, p in layer.parameters())
        return out


class GsnModel:
    """Per-frame 2D backbone with gate-shift mixing and a multi-task head."""

    def __init__(self, cfg: GsnConfig, seed: int):
        cfg.validate()
        from .egoaco import MultiTaskHead  # deferred: egoaco builds on this module

        self.cfg = cfg
        self.seed = seed
        dt = cfg.dtype
        self.stem = Conv2d(3, cfg.stem_channels, kernel_size=3, stride=2, padding=0,
                           seed=seed, name="stem", dtype=dt)
        self.blocks = []
        prev = cfg.stem_channels
        for i, ch in enumerate(cfg.block_channels):
            self.blocks.append(ConvBlock(prev, ch, seed=seed, name=f"blocks.{i}",
                                      use_gsm=cfg.use_gsm, dtype=dt))
            prev = ch
        self.feature_channels = prev
        self.head = MultiTaskHead(verb_in=prev, noun_in=prev, action_in=prev,
                                  verbs=cfg.verbs, nouns=cfg.nouns, actions=cfg.actions,
                                  seed=seed, name="head", dtype=dt)

    # input must keep every conv's spatial extent >= its kernel
    def min_input_size(self) -> int:
        need = 1 + 2 * len(self.blocks)   # invert the valid 3x3 blocks
        return (need - 1) * 2 + 3         # invert the stride-2 valid stem

    def features(self, clip: Tensor) -> Tensor:
        """Backbone features for a (B, T, 3, H, W) clip -> (B, T, C, h, w)."""
        if clip.ndim != 5 or clip.shape[2] != 3:
            raise ValueError(f"expected (B,T,3,H,W) clip, got {clip.shape}")
        b, t = clip.shape[0], clip.shape[1]
        x = clip.reshape(b * t, 3, clip.shape[3], clip.shape[4])
        x = self.stem(x)
        for block in self.blocks:
            x = block(x, b, t)
        _, c, h, w = x.shape
        return x.reshape(b, t, c, h, w)

    def pooled_features(self, clip: Tensor) -> Tensor:
        feats = self.features(clip)
        return T.avg_pool_spatial(T.mean(feats, axis=1))   # (B, C)

    def forward(self, clip: Tensor, training: bool = False, rng=None):
        """Clip scores: global average over time and space, then classify."""
        f = self.pooled_features(clip)
        f = T.dropout(f, self.cfg.dropout, rng, training)
        return self.head.apply(f, f, f)

    def consensus_scores(self, clip: Tensor):
        """Temporal average consensus: classify each frame, mean the scores."""
        feats = self.features(clip)
        b, t = feats.shape[0], feats.shape[1]
        per_frame = T.avg_pool_spatial(feats.reshape(b * t, *feats.shape[2:]))
        sv, sn, sa = self.head.apply(per_frame, per_frame, per_frame)
        return tuple(T.mean(s.reshape(b, t, s.shape[1]), axis=1) for s in (sv, sn, sa))

    def parameters(self) -> dict:
        named = [("stem", self.stem)]
        named += [(f"blocks.{i}", blk) for i, blk in enumerate(self.blocks)]
        named += [("head", self.head)]
        return collect_parameters(named)


def build_gsn(cfg: GsnConfig, seed: int) -> GsnModel:
    """Deterministic GSN construction; gate weights start at zero.

    Two builds with the same seed are bitwise identical, and a build with
    cfg.use_gsm=False shares every non-gate parameter value with the
    gated build (layer init streams are keyed by layer name).
    """
    return GsnModel(cfg, seed)
