import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lytnet.tensor import Tensor, backward, build_tape, debug_mode, no_grad, ops, precision


def T(a, **kw):
    return Tensor(np.asarray(a, dtype=np.float64), **kw)


def zero_pad_correlate(x, k):
    """Reference 2-D correlation of one channel, zero 'same' padding."""
    kh, kw = k.shape
    xp = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[i, j] = (xp[i:i + kh, j:j + kw] * k).sum()
    return out


class TestTensor:
    def test_rejects_empty_extent(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((0, 3)))

    def test_default_dtype_and_precision(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        with precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_no_grad_skips_tape(self):
        x = T([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._parents == ()

    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_debug_mode_flags_nonfinite(self):
        with debug_mode(), pytest.raises(FloatingPointError):
            ops.log(T([-1.0]))

    def test_tape_is_topological(self):
        x = T([1.0, 2.0], requires_grad=True)
        loss = ops.sum((x * x) + x)
        tape = build_tape(loss)
        pos = {id(n): i for i, n in enumerate(tape)}
        for node in tape:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]
        assert tape[-1] is loss

    def test_replay_is_bit_identical(self, rng):
        x = rng.standard_normal((1, 8, 8, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
        a = ops.conv2d(Tensor(x), Tensor(w)).data
        b = ops.conv2d(Tensor(x), Tensor(w)).data
        assert np.array_equal(a, b)


class TestConv2d:
    def test_box_sum_counts(self):
        out = ops.conv2d(T(np.ones((1, 4, 4, 1))), T(np.ones((3, 3, 1, 1))), T([0.0])).data[0, :, :, 0]
        assert out[1, 1] == 9 and out[2, 2] == 9
        assert out[0, 0] == 4 and out[3, 3] == 4 and out[0, 3] == 4
        assert out[0, 1] == 6

    def test_zero_weight_gives_bias(self, rng):
        out = ops.conv2d(T(rng.standard_normal((1, 5, 6, 2))), T(np.zeros((3, 3, 2, 3))), T([1.0, -2.0, 0.5]))
        assert np.all(out.data == np.array([1.0, -2.0, 0.5]))

    def test_stride2_identity_samples_even_coordinates(self):
        ramp = np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1)
        k = np.zeros((3, 3, 1, 1))
        k[1, 1] = 1.0
        out = ops.conv2d(T(ramp), T(k), stride=2).data
        assert out.shape == (1, 3, 3, 1)
        assert np.array_equal(out[0, :, :, 0], ramp[0, ::2, ::2, 0])

    @pytest.mark.parametrize("h,w,stride", [(8, 8, 2), (7, 9, 2), (6, 5, 1)])
    def test_same_output_extent(self, h, w, stride):
        out = ops.conv2d(T(np.ones((1, h, w, 2))), T(np.ones((3, 3, 2, 1))), stride=stride)
        assert out.shape == (1, math.ceil(h / stride), math.ceil(w / stride), 1)

    def test_matches_reference_correlation(self, rng):
        x = rng.standard_normal((1, 6, 7, 2))
        w = rng.standard_normal((3, 3, 2, 3))
        out = ops.conv2d(T(x), T(w)).data
        ref = np.zeros((6, 7, 3))
        for co in range(3):
            for ci in range(2):
                ref[..., co] += zero_pad_correlate(x[0, ..., ci], w[..., ci, co])
        np.testing.assert_allclose(out[0], ref, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(T(np.ones((1, 4, 4, 2))), T(np.ones((3, 3, 3, 1))))

    def test_linearity(self, rng):
        w = T(rng.standard_normal((3, 3, 3, 4)))
        x, y = rng.standard_normal((2, 1, 9, 9, 3))
        a, b = 0.7, -1.3
        lhs = ops.conv2d(T(a * x + b * y), w).data
        rhs = a * ops.conv2d(T(x), w).data + b * ops.conv2d(T(y), w).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


class TestDepthwise:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((1, 5, 5, 3))
        k = np.zeros((3, 3, 3))
        k[1, 1] = 1.0
        out = ops.depthwise_conv2d(T(x), T(k), T(np.zeros(3))).data
        assert np.array_equal(out, x)

    def test_zero_input_gives_bias(self):
        out = ops.depthwise_conv2d(T(np.zeros((1, 4, 4, 2))), T(np.ones((3, 3, 2))), T([3.0, -1.0])).data
        assert np.all(out[..., 0] == 3.0) and np.all(out[..., 1] == -1.0)

    def test_per_channel_hand_correlation(self):
        x = np.arange(18, dtype=np.float64).reshape(1, 3, 3, 2)
        k = np.stack([np.arange(9.0).reshape(3, 3), -np.eye(3)], axis=-1)
        out = ops.depthwise_conv2d(T(x), T(k), T([0.0, 0.0])).data
        for c in range(2):
            np.testing.assert_allclose(out[0, ..., c], zero_pad_correlate(x[0, ..., c], k[..., c]))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.depthwise_conv2d(T(np.ones((1, 4, 4, 2))), T(np.ones((3, 3, 3))))


class TestDense:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert np.array_equal(ops.dense(T(x), T(np.eye(4))).data, x)

    def test_hand_matmul(self):
        out = ops.dense(T([[1.0, 2.0]]), T([[1.0, 0.0], [0.0, 1.0]]), T([10.0, 20.0]))
        np.testing.assert_array_equal(out.data, [[11.0, 22.0]])

    def test_zero_weight(self):
        out = ops.dense(T(np.ones((3, 2))), T(np.zeros((2, 4))), T([1.0, 2.0, 3.0, 4.0]))
        assert np.all(out.data == [1, 2, 3, 4])

    def test_din_mismatch(self):
        with pytest.raises(ValueError):
            ops.dense(T(np.ones((1, 3))), T(np.ones((2, 2))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ops.softmax(T(np.full(5, 3.0))).data, 0.2)

    def test_closed_form(self):
        np.testing.assert_allclose(ops.softmax(T([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((3, 6))
        np.testing.assert_allclose(ops.softmax(T(x + 100)).data, ops.softmax(T(x)).data, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        y = ops.softmax(T(x), axis=-1).data
        assert np.all(np.abs(y.sum(axis=-1) - 1) < 1e-6)
        assert np.all((y >= 0) & (y <= 1))


class TestLayerNorm:
    def test_constant_vector(self):
        out = ops.layer_norm(T(np.full((1, 2, 2, 4), 7.0)), T(np.ones(4)), T(np.zeros(4))).data
        assert np.all(out == 0)

    def test_two_channel_case(self):
        out = ops.layer_norm(T([[1.0, 3.0]]), T([1.0, 1.0]), T([0.0, 0.0]), eps=1e-12).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)

    def test_zero_gain(self, rng):
        out = ops.layer_norm(T(rng.standard_normal((1, 3, 3, 4))), T(np.zeros(4)), T(np.full(4, 0.5))).data
        assert np.all(out == 0.5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(4, 16), st.integers(0, 10_000))
    def test_normalised_statistics(self, c, seed):
        x = np.random.default_rng(seed).uniform(-5, 5, (1, 3, 3, c))
        out = ops.layer_norm(T(x), T(np.ones(c)), T(np.zeros(c))).data
        assert np.all(np.abs(out.mean(-1)) < 1e-5)
        assert np.all(np.abs(out.std(-1) - 1) < 1e-3)


class TestPoolUpsample:
    def test_global_avg_constant(self):
        out = ops.pool2d(T(np.full((1, 4, 5, 2), 0.3)), "global_avg")
        assert out.shape == (1, 1, 1, 2)
        np.testing.assert_allclose(out.data, 0.3)

    def test_avg_and_max(self):
        x = T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
        assert ops.pool2d(x, "avg", 2).data.item() == 2.5
        assert ops.pool2d(x, "max", 2).data.item() == 4.0

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            ops.pool2d(T(np.ones((1, 2, 2, 1))), "avg", 4)

    def test_bilinear_ramp(self):
        x = T(np.array([0.0, 1.0]).reshape(1, 1, 2, 1))
        x = ops.concat([x, x], axis=1)
        out = ops.upsample_bilinear(x, 2).data[0, 0, :, 0]
        np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0])

    def test_bilinear_constant_and_shape(self):
        out = ops.upsample_bilinear(T(np.full((1, 4, 4, 3), 0.6)), 2)
        assert out.shape == (1, 8, 8, 3)
        np.testing.assert_allclose(out.data, 0.6, atol=1e-15)


class TestElementwise:
    def test_relu_tanh(self):
        np.testing.assert_array_equal(ops.elementwise(T([-1.0, 2.0]), "relu").data, [0.0, 2.0])
        assert ops.elementwise(T([0.0]), "tanh").data[0] == 0.0

    def test_concat_channels(self):
        a = T(np.zeros((1, 2, 2, 1)))
        b = T(np.ones((1, 2, 2, 2)))
        out = ops.elementwise(a, "concat_channels", b)
        assert out.shape == (1, 2, 2, 3)
        assert np.all(out.data[..., 0] == 0) and np.all(out.data[..., 1:] == 1)

    def test_channel_descriptor_broadcast(self, rng):
        x = rng.standard_normal((1, 3, 3, 4))
        d = rng.standard_normal((1, 1, 1, 4))
        np.testing.assert_allclose(ops.mul(T(x), T(d)).data, x * d)

    @pytest.mark.parametrize("sa,sb", [((1, 3, 3, 2), (1, 3, 2, 2)), ((2, 3), (3,)), ((1, 1, 3, 2), (1, 3, 3, 2))])
    def test_incompatible_shapes_rejected(self, sa, sb):
        with pytest.raises(ValueError, match="incompatible"):
            ops.add(T(np.ones(sa)), T(np.ones(sb)))


class TestBackward:
    def test_sum_of_squares(self):
        x = T([1.0, 2.0, 3.0], requires_grad=True)
        (g,) = backward(ops.sum(x * x), [x])
        np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])

    def test_unused_parameter_zero(self):
        x = T([1.0, 2.0], requires_grad=True)
        theta = T([5.0], requires_grad=True)
        gx, gt = backward(ops.sum(x), [x, theta])
        assert np.all(gt == 0) and gt.shape == (1,)

    def test_dense_weight_gradient(self):
        x = T([[1.0, 2.0]])
        w = T(np.zeros((2, 2)), requires_grad=True)
        (gw,) = backward(ops.sum(ops.dense(x, w)), [w])
        np.testing.assert_array_equal(gw, [[1.0, 1.0], [2.0, 2.0]])

    def test_non_scalar_rejected(self):
        x = T([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0, [x])

    def test_leaf_grad_populated(self):
        x = T([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert x.grad[0] == 6.0

    def test_shared_node_accumulates(self):
        x = T([2.0], requires_grad=True)
        y = x * x
        (g,) = backward(ops.sum(y + y), [x])
        assert g[0] == 8.0
