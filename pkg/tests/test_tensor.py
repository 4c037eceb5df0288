"""Forward semantics of the tensor ops: hand values, identities, errors."""

import numpy as np
import pytest

from minivid import tensor as T
from minivid.tensor import Tensor


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        w = Tensor([[[[1.0]]]])
        b = Tensor([0.0])
        out = T.conv2d(x, w, b, stride=(1, 1), padding=(0, 0))
        assert np.array_equal(out.data, x.data)

    def test_hand_summation(self):
        # 2x2 ones kernel over [[1,2],[3,4]] collapses to the total
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = Tensor(np.ones((1, 1, 2, 2)))
        b = Tensor([0.0])
        out = T.conv2d(x, w, b)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 10.0

    def test_groups_match_independent_convs(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 6, 7, 7)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        b = Tensor(rng.standard_normal(4))
        grouped = T.conv2d(x, w, b, padding=(1, 1), groups=2)
        lo = T.conv2d(Tensor(x.data[:, :3]), Tensor(w.data[:2]), Tensor(b.data[:2]),
                      padding=(1, 1))
        hi = T.conv2d(Tensor(x.data[:, 3:]), Tensor(w.data[2:]), Tensor(b.data[2:]),
                      padding=(1, 1))
        stacked = np.concatenate([lo.data, hi.data], axis=1)
        assert np.array_equal(grouped.data, stacked)

    def test_output_size_formula(self):
        x = Tensor(np.zeros((1, 1, 11, 9)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        out = T.conv2d(x, w, None, stride=(2, 2), padding=(1, 1))
        assert out.shape == (1, 1, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_rejects_bad_channel_split(self):
        x = Tensor(np.zeros((1, 6, 5, 5)))
        w = Tensor(np.zeros((4, 2, 3, 3)))
        with pytest.raises(ValueError, match="channel"):
            T.conv2d(x, w, None, groups=1)

    def test_rejects_kernel_larger_than_input(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        w = Tensor(np.zeros((1, 1, 5, 5)))
        with pytest.raises(ValueError, match="kernel"):
            T.conv2d(x, w, None)

    def test_rejects_group_indivisible_channels(self):
        x = Tensor(np.zeros((1, 5, 4, 4)))
        w = Tensor(np.zeros((2, 2, 3, 3)))
        with pytest.raises(ValueError, match="divisible"):
            T.conv2d(x, w, None, groups=2)


class TestLinear:
    def test_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        w = Tensor(np.eye(3))
        b = Tensor(np.zeros(3))
        assert np.array_equal(T.linear(x, w, b).data, x.data)

    def test_hand_value(self):
        out = T.linear(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), Tensor([5.0]))
        assert out.data.tolist() == [[16.0]]

    def test_bias_only(self):
        x = Tensor(np.random.default_rng(1).standard_normal((4, 3)))
        w = Tensor(np.zeros((2, 3)))
        b = Tensor([7.0, -1.0])
        out = T.linear(x, w, b)
        assert np.array_equal(out.data, np.tile([7.0, -1.0], (4, 1)))

    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError, match="feature dimension"):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), None)


class TestElementwise:
    def test_zero_points(self):
        z = Tensor(np.zeros((2, 2)))
        assert np.array_equal(T.elementwise("tanh", z).data, np.zeros((2, 2)))
        assert np.array_equal(T.elementwise("sigmoid", z).data, np.full((2, 2), 0.5))

    def test_multiply_by_ones(self):
        x = Tensor(np.random.default_rng(2).standard_normal((3, 4)))
        out = T.elementwise("multiply", x, Tensor(np.ones((3, 4))))
        assert np.array_equal(out.data, x.data)

    def test_tanh_saturation(self):
        out = Tensor(np.array([50.0])).tanh()
        assert abs(out.data[0] - 1.0) < 1e-9

    def test_sigmoid_extremes_stay_finite(self):
        out = Tensor(np.array([-1e4, 1e4])).sigmoid()
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_add_commutes(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((5,)))
        b = Tensor(rng.standard_normal((5,)))
        assert np.array_equal((a + b).data, (b + a).data)

    def test_shape_mismatch_names_dimension(self):
        with pytest.raises(ValueError, match="dimension 1"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown op"):
            T.elementwise("mod", Tensor([1.0]))


class TestSoftmaxSpatial:
    def test_constant_plane_uniform(self):
        x = Tensor(np.full((2, 1, 3, 4), 1.7))
        out = T.softmax_spatial(x)
        assert np.array_equal(out.data, np.full((2, 1, 3, 4), 1.0 / 12.0))

    def test_closed_form(self):
        x = Tensor(np.array([[[[0.0, np.log(3.0)]]]]))
        out = T.softmax_spatial(x)
        assert np.allclose(out.data.ravel(), [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((3, 1, 4, 4))
        a = T.softmax_spatial(Tensor(x)).data
        b = T.softmax_spatial(Tensor(x + 5.0)).data
        assert np.allclose(a, b, atol=1e-15)

    def test_sums_to_one(self):
        rng = np.random.default_rng(5)
        out = T.softmax_spatial(Tensor(rng.standard_normal((8, 1, 6, 7)) * 10))
        sums = out.data.reshape(8, -1).sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-12)
        assert np.all(out.data > 0)

    def test_rejects_multichannel(self):
        with pytest.raises(ValueError, match="B,1,H,W"):
            T.softmax_spatial(Tensor(np.zeros((1, 2, 3, 3))))


class TestPooling:
    def test_constant_tensor(self):
        x = Tensor(np.full((2, 3, 4, 4), 2.5))
        assert np.array_equal(T.avg_pool_spatial(x).data, np.full((2, 3), 2.5))

    def test_temporal_mean(self):
        x = Tensor(np.array([[1.0], [3.0]]))
        assert T.avg_pool_temporal(x, axis=0).data.tolist() == [2.0]

    def test_temporal_permutation_invariant(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 5, 3))
        perm = rng.permutation(5)
        a = T.avg_pool_temporal(Tensor(x), axis=1).data
        b = T.avg_pool_temporal(Tensor(x[:, perm]), axis=1).data
        assert np.allclose(a, b, atol=1e-15)

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            T.mean(Tensor(np.zeros((2, 0, 3))), axis=1)


class TestDeterminismAndFiniteness:
    def test_forward_bitwise_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 8, 8))
        w1 = rng.standard_normal((4, 3, 3, 3))
        w2 = rng.standard_normal((1, 4, 3, 3))

        def run():
            out = T.conv2d(Tensor(x), Tensor(w1), None, padding=(1, 1))
            return T.softmax_spatial(
                T.conv2d(out.relu(), Tensor(w2), None, padding=(1, 1))
            ).data

        assert np.array_equal(run(), run())

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 1, 5, 5)) * 100)
        for out in (x.tanh(), x.sigmoid(), x.relu(), T.softmax_spatial(x)):
            assert np.all(np.isfinite(out.data))


class TestExpandConcat:
    def test_expand_materializes_broadcast(self):
        x = Tensor(np.array([[[[2.0]], [[3.0]]]]))   # (1,2,1,1)
        out = T.expand(x, (1, 2, 2, 2))
        assert np.array_equal(out.data[0, 0], np.full((2, 2), 2.0))
        assert np.array_equal(out.data[0, 1], np.full((2, 2), 3.0))

    def test_expand_rejects_non_unit_growth(self):
        with pytest.raises(ValueError, match="dimension 1"):
            T.expand(Tensor(np.zeros((1, 2))), (1, 4))

    def test_concat_roundtrip(self):
        a = Tensor(np.ones((2, 2)))
        b = Tensor(np.zeros((2, 3)))
        out = T.concat([a, b], axis=1)
        assert out.shape == (2, 5)
        assert np.array_equal(out.data[:, :2], a.data)
