"""Gate-shift layer contracts: gating split, time shift, identity init,
and the network built around them."""

import numpy as np
import pytest

from minivid import tensor as T
from minivid.gsm import (GsmLayer, GsnConfig, build_gsn, gsm_forward,
                         group_shift, spatial_gate)
from minivid.tensor import Tensor


def make_layer(channels, seed=0, name="t.gsm", weight_scale=0.0, rng=None):
    layer = GsmLayer(channels, seed=seed, name=name)
    if weight_scale:
        layer.gate.weight.data += rng.standard_normal(layer.gate.weight.shape) * weight_scale
        layer.gate.bias.data += rng.standard_normal(layer.gate.bias.shape) * weight_scale
    return layer


class TestSpatialGate:
    def test_zero_gate_yields_zero_gated_full_residual(self):
        rng = np.random.default_rng(0)
        y = Tensor(rng.standard_normal((2, 3, 4, 5, 5)))
        gated, residual = spatial_gate(y, make_layer(4))
        assert np.array_equal(gated.data, np.zeros_like(y.data))
        assert np.array_equal(residual.data, y.data)

    def test_saturated_gate_passes_everything(self):
        rng = np.random.default_rng(1)
        y = Tensor(rng.standard_normal((1, 2, 4, 6, 6)))
        layer = make_layer(4)
        layer.gate.bias.data[:] = 30.0     # tanh saturates to exactly 1.0
        gated, residual = spatial_gate(y, layer)
        assert np.allclose(gated.data, y.data, atol=1e-6)
        assert np.allclose(residual.data, 0.0, atol=1e-6)

    def test_reconstruction_bitwise(self):
        rng = np.random.default_rng(2)
        for trial in range(50):
            shape = (rng.integers(1, 3), rng.integers(1, 5), 2 * rng.integers(1, 4),
                     rng.integers(1, 7), rng.integers(1, 7))
            y = Tensor(rng.standard_normal(shape) * 10.0 ** rng.integers(-3, 4))
            layer = make_layer(shape[2], name=f"r{trial}.gsm", weight_scale=0.7, rng=rng)
            gated, residual = spatial_gate(y, layer)
            assert np.array_equal((gated + residual).data, y.data)

    def test_gate_plane_matches_input_spatial_shape(self):
        y = Tensor(np.zeros((1, 2, 4, 9, 7)))
        layer = make_layer(4)
        flat = y.reshape(2, 4, 9, 7)
        planes = layer.gate(flat)
        assert planes.shape == (2, 2, 9, 7)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel"):
            spatial_gate(Tensor(np.zeros((1, 2, 6, 4, 4))), make_layer(4))

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError, match="even"):
            GsmLayer(5, seed=0, name="bad")


class TestGroupShift:
    def test_single_frame_all_zero(self):
        y = Tensor(np.random.default_rng(3).standard_normal((2, 1, 4, 3, 3)))
        assert np.array_equal(group_shift(y).data, np.zeros_like(y.data))

    def test_three_frame_hand_values(self):
        # group 1 (first half) goes forward, group 2 backward
        x = np.zeros((1, 3, 2, 1, 1))
        x[0, :, 0, 0, 0] = [1.0, 2.0, 3.0]   # a, b, c
        x[0, :, 1, 0, 0] = [1.0, 2.0, 3.0]
        out = group_shift(Tensor(x)).data
        assert out[0, :, 0, 0, 0].tolist() == [0.0, 1.0, 2.0]
        assert out[0, :, 1, 0, 0].tolist() == [2.0, 3.0, 0.0]

    def test_index_map_oracle(self):
        """Explicit gather with zero fill, random shapes."""
        rng = np.random.default_rng(4)
        for trial in range(200):
            b, t_len, half, h, w = (int(rng.integers(1, 3)), int(rng.integers(1, 6)),
                                    int(rng.integers(1, 4)), int(rng.integers(1, 5)),
                                    int(rng.integers(1, 5)))
            x = rng.standard_normal((b, t_len, 2 * half, h, w))
            expected = np.zeros_like(x)
            for tt in range(t_len):
                for c in range(2 * half):
                    src = tt - 1 if c < half else tt + 1
                    if 0 <= src < t_len:
                        expected[:, tt, c] = x[:, src, c]
            assert np.array_equal(group_shift(Tensor(x)).data, expected)

    def test_linearity_exact(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 4, 6, 3, 3))
        y = rng.standard_normal((2, 4, 6, 3, 3))
        a, b = 3.0, -0.5
        lhs = group_shift(Tensor(a * x + b * y)).data
        rhs = a * group_shift(Tensor(x)).data + b * group_shift(Tensor(y)).data
        assert np.array_equal(lhs, rhs)

    def test_odd_channels_rejected(self):
        with pytest.raises(ValueError, match="even"):
            group_shift(Tensor(np.zeros((1, 2, 3, 2, 2))))


class TestGsmForward:
    def test_zero_gate_is_identity_bitwise(self):
        rng = np.random.default_rng(6)
        y = Tensor(rng.standard_normal((2, 5, 8, 4, 4)))
        assert np.array_equal(gsm_forward(y, make_layer(8)).data, y.data)

    def test_single_frame_reduces_to_residual(self):
        rng = np.random.default_rng(7)
        y = Tensor(rng.standard_normal((2, 1, 4, 5, 5)))
        layer = make_layer(4, weight_scale=0.5, rng=rng)
        out = gsm_forward(y, layer)
        _, residual = spatial_gate(y, layer)
        assert np.array_equal(out.data, residual.data)

    def test_hand_trace_two_frames_saturated_gate(self):
        # time-major input [[p,q],[r,s]], one channel per group, gate == 1
        p, q, r, s = 1.5, -2.0, 0.25, 4.0
        y = np.zeros((1, 2, 2, 1, 1))
        y[0, 0, 0], y[0, 0, 1] = p, q
        y[0, 1, 0], y[0, 1, 1] = r, s
        layer = make_layer(2)
        layer.gate.bias.data[:] = 30.0
        out = gsm_forward(Tensor(y), layer).data
        assert out[0, 0, 0] == 0.0 and out[0, 0, 1] == s
        assert out[0, 1, 0] == p and out[0, 1, 1] == 0.0

    def test_fused_path_matches_composed_path_bitwise(self):
        rng = np.random.default_rng(8)
        y = Tensor(rng.standard_normal((2, 4, 6, 5, 7)))
        layer = make_layer(6, weight_scale=0.6, rng=rng)
        fused = gsm_forward(y, layer)
        gated, residual = spatial_gate(y, layer)
        composed = group_shift(gated) + residual
        assert np.array_equal(fused.data, composed.data)


class TestGsnModel:
    CFG = dict(stem_channels=4, block_channels=(4, 6, 6), verbs=3, nouns=2,
               actions=5, dropout=0.0)

    def test_same_seed_builds_bitwise_identical(self):
        a = build_gsn(GsnConfig(**self.CFG), seed=9)
        b = build_gsn(GsnConfig(**self.CFG), seed=9)
        pa, pb = a.parameters(), b.parameters()
        assert list(pa) == list(pb)
        for name in pa:
            assert np.array_equal(pa[name].data, pb[name].data), name

    def test_zero_gate_network_matches_plain_backbone(self):
        gsn = build_gsn(GsnConfig(**self.CFG), seed=10)
        plain = build_gsn(GsnConfig(**{**self.CFG, "use_gsm": False}), seed=10)
        rng = np.random.default_rng(11)
        clip = Tensor(rng.random((2, 3, 3, 17, 17)))
        for a, b in zip(gsn.forward(clip), plain.forward(clip)):
            assert np.array_equal(a.data, b.data)

    def test_parameter_count_is_backbone_plus_gates(self):
        gsn = build_gsn(GsnConfig(**self.CFG), seed=12)
        plain = build_gsn(GsnConfig(**{**self.CFG, "use_gsm": False}), seed=12)
        n_gsn = sum(p.size for p in gsn.parameters().values())
        n_plain = sum(p.size for p in plain.parameters().values())
        expected_gates = sum(2 * (c // 2) * 9 + 2 for c in self.CFG["block_channels"])
        assert n_gsn - n_plain == expected_gates

    def test_zero_gate_scores_frame_permutation_invariant(self):
        gsn = build_gsn(GsnConfig(**self.CFG), seed=13)
        rng = np.random.default_rng(14)
        clip = rng.random((1, 5, 3, 17, 17))
        perm = rng.permutation(5)
        base = gsn.forward(Tensor(clip))
        shuffled = gsn.forward(Tensor(clip[:, perm]))
        for a, b in zip(base, shuffled):
            assert np.allclose(a.data, b.data, atol=1e-12)

    def test_nonzero_gates_are_order_sensitive(self):
        gsn = build_gsn(GsnConfig(**self.CFG), seed=15)
        rng = np.random.default_rng(16)
        for name, p in gsn.parameters().items():
            if ".gsm.gate." in name:
                p.data += rng.standard_normal(p.shape) * 0.5
        clip = rng.random((1, 4, 3, 17, 17))
        fwd = gsn.forward(Tensor(clip))
        rev = gsn.forward(Tensor(clip[:, ::-1]))
        diffs = max(np.abs(a.data - b.data).max() for a, b in zip(fwd, rev))
        assert diffs > 1e-6

    def test_odd_channel_config_rejected(self):
        with pytest.raises(ValueError, match="even"):
            build_gsn(GsnConfig(stem_channels=4, block_channels=(4, 7, 8)), seed=0)

    def test_removing_gsm_layers_gives_per_frame_network(self):
        plain = build_gsn(GsnConfig(**{**self.CFG, "use_gsm": False}), seed=17)
        rng = np.random.default_rng(18)
        clip = rng.random((1, 3, 3, 17, 17))
        feats = plain.features(Tensor(clip)).data
        for t in range(3):
            single = plain.features(Tensor(clip[:, t:t + 1])).data
            assert np.allclose(feats[:, t], single[:, 0], atol=1e-12)
