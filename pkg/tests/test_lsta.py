"""Recurrent attention cell: attention validity, gating closed forms,
the pooled-memory output bias, and sequence aggregation."""

import numpy as np
import pytest

from minivid import tensor as T
from minivid.lsta import LstaCell, LstaState, aggregate, attend, cell_step, memory_gate_bias
from minivid.tensor import Tensor


def zeroed_cell(in_ch=2, cm=3, p=2, lam=1.0):
    cell = LstaCell(in_ch, memory_size=cm, pooling_classes=p, attention_decay=lam,
                    seed=0, name="z")
    for _, param in cell.parameters():
        param.data[:] = 0.0
    return cell


def random_cell(rng, in_ch=2, cm=3, p=2, lam=1.0, scale=0.4):
    cell = LstaCell(in_ch, memory_size=cm, pooling_classes=p, attention_decay=lam,
                    seed=int(rng.integers(2**31)), name="r")
    return cell


class TestAttend:
    def test_fresh_state_zero_weights_uniform(self):
        cell = zeroed_cell()
        state = cell.initial_state(1, 4, 5)
        a = attend(Tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 5))), state, cell)
        assert np.array_equal(a.data, np.full((1, 1, 4, 5), 1.0 / 20.0))

    def test_always_valid_distribution(self):
        rng = np.random.default_rng(1)
        cell = random_cell(rng)
        state = cell.initial_state(2, 3, 3)
        for _ in range(6):
            x = Tensor(rng.standard_normal((2, 2, 3, 3)) * 3)
            state, _ = cell_step(x, state, cell)
            sums = state.attention.data.reshape(2, -1).sum(axis=1)
            assert np.all(np.abs(sums - 1.0) <= 1e-9)
            assert np.all(state.attention.data >= 0)

    def test_decay_zero_ignores_attention_history(self):
        rng = np.random.default_rng(2)
        cell = random_cell(rng, lam=0.0)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        h = Tensor(rng.standard_normal((1, 3, 3, 3)))
        c = Tensor(np.zeros((1, 3, 3, 3)))
        uniform = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        peaked = np.zeros((1, 1, 3, 3))
        peaked[0, 0, 1, 2] = 1.0
        a1 = attend(x, LstaState(c, h, uniform), cell)
        a2 = attend(x, LstaState(c, h, Tensor(peaked)), cell)
        assert np.array_equal(a1.data, a2.data)

    def test_decay_one_couples_history(self):
        rng = np.random.default_rng(3)
        cell = random_cell(rng, lam=1.0)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        h = Tensor(np.zeros((1, 3, 3, 3)))
        c = Tensor(np.zeros((1, 3, 3, 3)))
        uniform = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
        peaked = np.full((1, 1, 3, 3), 1e-4)
        peaked[0, 0, 1, 2] = 1.0 - 8e-4
        a1 = attend(x, LstaState(c, h, uniform), cell)
        a2 = attend(x, LstaState(c, h, Tensor(peaked)), cell)
        assert np.abs(a1.data - a2.data).max() > 1e-3

    def test_spatial_mismatch_rejected(self):
        cell = zeroed_cell()
        state = cell.initial_state(1, 4, 4)
        with pytest.raises(ValueError, match="spatial"):
            attend(Tensor(np.zeros((1, 2, 3, 3))), state, cell)


class TestCellStep:
    def test_zero_everything_closed_form(self):
        # gates sigmoid(0) = 0.5, memory tanh(0) = 0, so c1 = 0 and h1 = 0
        cell = zeroed_cell()
        state = cell.initial_state(1, 3, 3)
        new, h = cell_step(Tensor(np.zeros((1, 2, 3, 3))), state, cell)
        assert np.array_equal(new.memory.data, np.zeros((1, 3, 3, 3)))
        assert np.array_equal(h.data, np.zeros((1, 3, 3, 3)))

    def test_hidden_bounded_by_one(self):
        rng = np.random.default_rng(4)
        cell = random_cell(rng, scale=2.0)
        state = cell.initial_state(2, 3, 3)
        for _ in range(10):
            state, h = cell_step(Tensor(rng.standard_normal((2, 2, 3, 3)) * 5), state, cell)
            assert np.all(np.abs(h.data) <= 1.0)

    def test_memory_grows_at_most_linearly(self):
        rng = np.random.default_rng(5)
        cell = random_cell(rng, scale=2.0)
        state = cell.initial_state(1, 3, 3)
        for t in range(1, 12):
            state, _ = cell_step(Tensor(rng.standard_normal((1, 2, 3, 3)) * 5), state, cell)
            assert np.abs(state.memory.data).max() <= t + 1e-12

    def test_scalar_hand_trace(self):
        """1x1 spatial cell against an independently computed transcript."""
        cell = zeroed_cell(in_ch=1, cm=1, p=2)
        # a 3x3 conv on a 1x1 padded map reduces to center weight * value + bias
        cell.conv_attn.weight.data[0, 0, 1, 1] = 0.2
        cell.conv_attn.weight.data[0, 1, 1, 1] = -0.3
        cell.conv_attn.bias.data[0] = 0.1
        cell.conv_i.weight.data[0, 0, 1, 1] = 0.4
        cell.conv_i.weight.data[0, 1, 1, 1] = 0.1
        cell.conv_i.bias.data[0] = -0.2
        cell.conv_f.weight.data[0, 0, 1, 1] = -0.5
        cell.conv_f.weight.data[0, 1, 1, 1] = 0.2
        cell.conv_f.bias.data[0] = 0.3
        cell.conv_g.weight.data[0, 0, 1, 1] = 0.7
        cell.conv_g.weight.data[0, 1, 1, 1] = -0.4
        cell.conv_g.bias.data[0] = 0.05
        cell.conv_o.weight.data[0, 0, 1, 1] = 0.3
        cell.conv_o.weight.data[0, 1, 1, 1] = 0.6
        cell.conv_o.bias.data[0] = -0.1
        cell.prototypes.data[:, 0] = [0.8, -0.6]

        state = cell.initial_state(1, 1, 1)
        new, h = cell_step(Tensor(np.full((1, 1, 1, 1), 0.5)), state, cell)
        assert abs(new.memory.data[0, 0, 0, 0] - 0.18997448112761245) < 1e-12
        assert abs(h.data[0, 0, 0, 0] - 0.10518794057461521) < 1e-12
        assert new.attention.data[0, 0, 0, 0] == 1.0


class TestMemoryGateBias:
    def test_depends_only_on_spatial_average(self):
        # dyadic values keep the pooled mean exact under the perturbation
        cell = random_cell(np.random.default_rng(6))
        base = np.zeros((1, 3, 2, 2))
        base[0] = 0.25
        pattern = np.zeros((1, 3, 2, 2))
        pattern[0, :, 0, 0] = 0.5
        pattern[0, :, 1, 1] = -0.5
        w1 = memory_gate_bias(cell, Tensor(base))
        w2 = memory_gate_bias(cell, Tensor(base + pattern))
        assert np.array_equal(w1.data, w2.data)

    def test_bias_is_convex_combination_of_prototypes(self):
        cell = random_cell(np.random.default_rng(7))
        mem = Tensor(np.random.default_rng(8).standard_normal((2, 3, 4, 4)))
        w = memory_gate_bias(cell, mem).data
        protos = cell.prototypes.data
        lo = protos.min(axis=0) - 1e-12
        hi = protos.max(axis=0) + 1e-12
        assert np.all(w >= lo) and np.all(w <= hi)


class TestAggregate:
    def test_single_frame_equals_one_step(self):
        rng = np.random.default_rng(9)
        cell = random_cell(rng)
        x = rng.standard_normal((1, 2, 3, 3))
        d = aggregate(Tensor(x[None][0]), cell)     # (T=1, C, H, W)
        state = cell.initial_state(1, 3, 3)
        _, h = cell_step(Tensor(x), state, cell)
        expected = T.avg_pool_spatial(h).data[0]
        assert np.allclose(d.data, expected, atol=1e-15)

    def test_output_shape_fixed_by_memory_size(self):
        rng = np.random.default_rng(10)
        cell = random_cell(rng, cm=3)
        for t_len, h, w in ((1, 2, 2), (4, 3, 5), (7, 2, 6)):
            d = aggregate(Tensor(rng.standard_normal((t_len, 2, h, w))), cell)
            assert d.shape == (3,)

    def test_batched_matches_per_sequence(self):
        rng = np.random.default_rng(11)
        cell = random_cell(rng)
        x = rng.standard_normal((3, 4, 2, 3, 3))
        batched = aggregate(Tensor(x), cell).data
        for b in range(3):
            single = aggregate(Tensor(x[b]), cell).data
            assert np.allclose(batched[b], single, atol=1e-12)

    def test_gradient_reaches_first_frame(self):
        rng = np.random.default_rng(12)
        cell = random_cell(rng)
        x = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
        aggregate(x, cell).sum().backward()
        assert np.abs(x.grad[0]).max() > 0

    def test_empty_sequence_rejected(self):
        cell = zeroed_cell()
        with pytest.raises(ValueError, match="empty"):
            aggregate(Tensor(np.zeros((0, 2, 3, 3))), cell)
