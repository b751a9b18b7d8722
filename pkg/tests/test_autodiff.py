"""
Tests for the tensor engine and primitive operators
"""
import math

import numpy as np
import pytest

from bnprune.exceptions import NumericalError, ShapeError
from bnprune.utils import ops
from bnprune.utils.autodiff import BatchNormParams, Tape, Tensor, backward
from bnprune.utils.netgraph import forward, param_key
from bnprune.utils.sparsifier import rescale_gamma_w
from tests.helpers import gradient_errors, numerical_gradient, randomize, relative_error


def reference_conv(x, kernel, stride=1):
    n, h, w, _ = x.shape
    kh, kw, _, cout = kernel.shape
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = x[b, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                for o in range(cout):
                    out[b, i, j, o] = np.sum(patch * kernel[..., o])
    return out


def unit_params(channels, **overrides):
    values = dict(
        gamma=np.ones(channels),
        beta=np.zeros(channels),
        moving_mean=np.zeros(channels),
        moving_var=np.ones(channels),
    )
    values.update(overrides)
    return BatchNormParams(values["gamma"], values["beta"], values["moving_mean"], values["moving_var"])


class TestTensor:

    def test_integer_data_becomes_float64(self):
        t = Tensor([1, 2, 3])
        assert t.dtype == np.float64
        assert t.shape == (3,)

    def test_float32_is_kept(self):
        assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32

    def test_check_finite(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, np.nan]).check_finite()


class TestBackward:

    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(x)
        grads = backward(tape, loss)
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ops.relu(x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_non_trainable_inputs_skipped(self):
        x = Tensor(np.ones((1, 2)), requires_grad=True)
        w = Tensor(np.ones((2, 2)))
        with Tape() as tape:
            loss = ops.sum(ops.dense(x, w))
        grads = tape.backward(loss)
        assert x in grads
        assert w not in grads

    def test_nothing_recorded_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ops.relu(x)
        assert not y.requires_grad

    def test_reused_input_accumulates(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        np.testing.assert_allclose(tape.backward(loss)[x], [2.0, -4.0])


class TestConv2d:

    def test_identity_1x1_kernel(self, rng):
        x = rng.standard_normal((2, 5, 5, 3))
        kernel = np.eye(3).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(ops.conv2d(x, kernel).data, x)

    def test_constant_channel(self, rng):
        x = np.full((1, 6, 6, 1), 2.5)
        kernel = rng.standard_normal((3, 3, 1, 4))
        out = ops.conv2d(x, kernel).data
        np.testing.assert_allclose(out, np.broadcast_to(2.5 * kernel.sum(axis=(0, 1, 2)), out.shape), atol=1e-12)

    def test_matches_nested_loops(self, rng):
        x = rng.standard_normal((1, 4, 4, 2))
        kernel = rng.standard_normal((3, 3, 2, 3))
        np.testing.assert_allclose(ops.conv2d(x, kernel).data, reference_conv(x, kernel), atol=1e-12)

    def test_strided_matches_nested_loops(self, rng):
        x = rng.standard_normal((2, 7, 7, 2))
        kernel = rng.standard_normal((3, 3, 2, 2))
        np.testing.assert_allclose(ops.conv2d(x, kernel, stride=2).data, reference_conv(x, kernel, 2), atol=1e-12)

    @pytest.mark.parametrize("size,stride", [(8, 1), (8, 2), (7, 2), (5, 3)])
    def test_same_padding_size(self, rng, size, stride):
        x = rng.standard_normal((1, size, size, 1))
        out = ops.conv2d(x, rng.standard_normal((3, 3, 1, 2)), stride=stride, padding="same")
        assert out.shape == (1, math.ceil(size / stride), math.ceil(size / stride), 2)

    def test_same_padding_puts_extra_after(self):
        assert ops.pad_amounts(8, 2, 1, "same") == (0, 1)
        assert ops.pad_amounts(8, 4, 1, "same") == (1, 2)
        assert ops.pad_amounts(8, 3, 1, "valid") == (0, 0)

    def test_same_padding_matches_padded_reference(self, rng):
        x = rng.standard_normal((1, 6, 6, 2))
        kernel = rng.standard_normal((3, 3, 2, 2))
        padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        np.testing.assert_allclose(ops.conv2d(x, kernel, padding="same").data, reference_conv(padded, kernel), atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self, rng):
        with pytest.raises(ShapeError) as err:
            ops.conv2d(rng.standard_normal((1, 5, 5, 2)), rng.standard_normal((3, 3, 3, 4)))
        assert "(1, 5, 5, 2)" in str(err.value)
        assert "(3, 3, 3, 4)" in str(err.value)


class TestBatchNorm:

    def test_identity_in_inference(self, rng):
        x = rng.standard_normal((2, 3, 3, 4))
        out = ops.batchnorm(x, unit_params(4), "inference", epsilon=0.0).output
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_zero_gamma_gives_constant_beta(self, rng):
        x = rng.standard_normal((2, 4, 4, 3))
        params = unit_params(3, gamma=np.array([1.0, 0.0, 2.0]), beta=np.array([0.5, -1.5, 0.0]))
        for mode in ("training", "inference"):
            out = ops.batchnorm(x, params, mode).output.data
            assert np.all(out[..., 1] == -1.5)

    def test_constant_after_relu(self, rng):
        x = rng.standard_normal((2, 4, 4, 2))
        params = unit_params(2, gamma=np.array([0.0, 0.0]), beta=np.array([-1.0, 2.0]))
        out = ops.relu(ops.batchnorm(x, params, "inference").output).data
        assert np.all(out[..., 0] == 0.0)
        assert np.all(out[..., 1] == 2.0)

    def test_training_statistics(self, rng):
        x = rng.standard_normal((4, 5, 5, 3)) * 3.0 + 1.0
        gamma = np.array([0.5, 1.0, 2.0])
        params = unit_params(3, gamma=gamma, beta=np.zeros(3))
        out = ops.batchnorm(x, params, "training").output.data
        var = x.var(axis=(0, 1, 2))
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), gamma ** 2 * var / (var + params.epsilon), atol=1e-6)

    def test_moving_stats_update(self, rng):
        x = rng.standard_normal((3, 2, 2, 2))
        params = unit_params(2)
        result = ops.batchnorm(x, params, "training")
        m = params.momentum
        np.testing.assert_allclose(result.params.moving_mean, (1 - m) * x.mean(axis=(0, 1, 2)))
        np.testing.assert_allclose(result.params.moving_var, m + (1 - m) * x.var(axis=(0, 1, 2)))
        np.testing.assert_array_equal(params.moving_mean, np.zeros(2))

    def test_zero_size_batch_rejected(self):
        with pytest.raises(ShapeError):
            ops.batchnorm(np.zeros((0, 2, 2, 3)), unit_params(3), "training")

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ops.batchnorm(np.zeros((1, 2, 2, 3)), unit_params(4), "inference")

    def test_param_validation(self):
        with pytest.raises(ShapeError):
            BatchNormParams(np.ones(3), np.zeros(2), np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            BatchNormParams(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), epsilon=0.0)
        with pytest.raises(ValueError):
            BatchNormParams(np.ones(3), np.zeros(3), np.zeros(3), -np.ones(3))

    @pytest.mark.parametrize("alpha", [0.01, 0.5, 3.0, 100.0])
    def test_kernel_scale_has_no_effect(self, rng, alpha):
        x = rng.standard_normal((2, 6, 6, 2))
        kernel = rng.standard_normal((3, 3, 2, 4))
        params = unit_params(4, gamma=rng.uniform(0.5, 2, 4), beta=rng.standard_normal(4))
        base = ops.batchnorm(ops.conv2d(x, kernel), params, "training", epsilon=0.0).output.data
        scaled = ops.batchnorm(ops.conv2d(x, alpha * kernel), params, "training", epsilon=0.0).output.data
        np.testing.assert_allclose(scaled, base, rtol=1e-6, atol=1e-9)


class TestPointwiseAndPooling:

    def test_relu(self):
        np.testing.assert_array_equal(ops.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_propagates_nan(self):
        x = Tensor(np.array([np.nan, -1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            y = ops.relu(x)
            loss = ops.sum(y)
        assert np.isnan(y.data[0])
        np.testing.assert_array_equal(y.data[1:], [0.0, 2.0])
        np.testing.assert_array_equal(tape.backward(loss)[x], [0.0, 0.0, 1.0])

    def test_relu_idempotent(self, rng):
        x = rng.standard_normal((2, 3, 3, 2))
        np.testing.assert_array_equal(ops.relu(ops.relu(x)).data, ops.relu(x).data)

    @pytest.mark.parametrize("pool", [ops.maxpool, ops.avgpool])
    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_pool_of_constant(self, pool, padding):
        x = np.full((1, 7, 7, 2), 1.75)
        out = pool(x, 3, 2, padding).data
        np.testing.assert_allclose(out, 1.75, rtol=0, atol=1e-15)

    def test_maxpool_convnet_geometry(self, rng):
        assert ops.maxpool(rng.standard_normal((1, 32, 32, 1)), 3, 2, "same").shape == (1, 16, 16, 1)

    def test_maxpool_values(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        np.testing.assert_array_equal(ops.maxpool(x, 2, 2).data[0, :, :, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_maxpool_monotone(self, rng):
        x = rng.standard_normal((1, 6, 6, 2))
        assert np.all(ops.maxpool(x + 1.0, 2, 2).data >= ops.maxpool(x, 2, 2).data)

    def test_dense(self):
        out = ops.dense(np.ones((2, 3)), np.ones((3, 4)), np.arange(4.0)).data
        np.testing.assert_array_equal(out, np.tile([3.0, 4.0, 5.0, 6.0], (2, 1)))

    def test_uniform_logits_give_log_classes(self):
        for classes in (2, 5, 10):
            loss = ops.softmax_cross_entropy(np.zeros((3, classes)), np.zeros(3, dtype=int))
            assert loss.item() == pytest.approx(math.log(classes))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_shortcut_pads_channels(self, rng):
        x = rng.standard_normal((1, 4, 4, 2))
        out = ops.shortcut(x, 2, 4).data
        assert out.shape == (1, 2, 2, 4)
        np.testing.assert_array_equal(out[..., 1:3], x[:, ::2, ::2, :])
        assert np.all(out[..., 0] == 0) and np.all(out[..., 3] == 0)


def _bn(mode):
    moving_mean = np.array([0.1, -0.2, 0.3])
    moving_var = np.array([0.5, 1.5, 2.0])

    def fn(x, gamma, beta):
        return ops.batchnorm(x, BatchNormParams(gamma, beta, moving_mean, moving_var), mode).output

    return fn


GRADIENT_CASES = [
    ("conv valid", lambda x, k: ops.conv2d(x, k), [(2, 6, 6, 3), (3, 3, 3, 2)]),
    ("conv same", lambda x, k: ops.conv2d(x, k, 1, "same"), [(1, 5, 5, 2), (3, 3, 2, 3)]),
    ("conv valid stride 2", lambda x, k: ops.conv2d(x, k, 2), [(2, 7, 7, 2), (3, 3, 2, 2)]),
    ("conv same stride 2", lambda x, k: ops.conv2d(x, k, 2, "same"), [(1, 8, 8, 4), (3, 3, 4, 2)]),
    ("conv 5x5 same", lambda x, k: ops.conv2d(x, k, 1, "same"), [(1, 6, 6, 1), (5, 5, 1, 2)]),
    ("conv 1x1", lambda x, k: ops.conv2d(x, k), [(2, 3, 3, 4), (1, 1, 4, 3)]),
    ("bias_add", lambda x, b: ops.bias_add(x, b), [(2, 3, 3, 4), (4,)]),
    ("batchnorm training", _bn("training"), [(2, 4, 4, 3), (3,), (3,)]),
    ("batchnorm inference", _bn("inference"), [(2, 4, 4, 3), (3,), (3,)]),
    ("relu", lambda x: ops.relu(x), [(2, 4, 4, 3)]),
    ("maxpool valid", lambda x: ops.maxpool(x, 2, 2), [(2, 6, 6, 2)]),
    ("maxpool same 3x3 s2", lambda x: ops.maxpool(x, 3, 2, "same"), [(1, 8, 8, 3)]),
    ("avgpool valid", lambda x: ops.avgpool(x, 2, 2), [(2, 6, 6, 2)]),
    ("avgpool same", lambda x: ops.avgpool(x, 3, 2, "same"), [(1, 7, 7, 2)]),
    ("dense", lambda x, w, b: ops.dense(x, w, b), [(4, 6), (6, 3), (3,)]),
    ("dense no bias", lambda x, w: ops.dense(x, w), [(2, 8), (8, 5)]),
    ("reshape", lambda x: ops.reshape(x, (2, -1)), [(2, 3, 3, 2)]),
    ("add", lambda a, b: ops.add(a, b), [(2, 3, 3, 2), (2, 3, 3, 2)]),
    ("mul", lambda a, b: ops.mul(a, b), [(2, 4), (2, 4)]),
    ("shortcut", lambda x: ops.shortcut(x, 2, 4), [(2, 4, 4, 2)]),
    ("sum", lambda x: ops.sum(x), [(2, 3, 4)]),
    ("cross entropy", lambda z: ops.softmax_cross_entropy(z, np.array([0, 2, 1, 2])), [(4, 3)]),
]


class TestGradients:

    @pytest.mark.parametrize("name,fn,shapes", GRADIENT_CASES, ids=[c[0] for c in GRADIENT_CASES])
    def test_matches_finite_differences(self, name, fn, shapes):
        rng = np.random.default_rng(sum(map(ord, name)))
        arrays = [rng.standard_normal(shape) for shape in shapes]
        if name.startswith("batchnorm"):
            arrays[1] = rng.uniform(0.5, 1.5, shapes[1])
        for error in gradient_errors(fn, arrays, rng):
            assert error <= 1e-4

    def test_network_gradients(self, tiny_graph, rng):
        graph = randomize(tiny_graph, rng)
        images = rng.standard_normal((3, 8, 8, 4))
        labels = np.array([0, 1, 1])
        keys = graph.trainable_keys()
        arrays = {key: np.array(graph.params[key]) for key in keys}

        def loss_of(tensors):
            return ops.softmax_cross_entropy(forward(graph, images, "training", tensors).logits, labels)

        tensors = {key: Tensor(value) for key, value in graph.params.items()}
        tensors.update({key: Tensor(arrays[key], requires_grad=True) for key in keys})
        with Tape() as tape:
            loss = loss_of(tensors)
        grads = tape.backward(loss)

        def objective():
            plain = {key: Tensor(value) for key, value in graph.params.items()}
            plain.update({key: Tensor(arrays[key]) for key in keys})
            return loss_of(plain).item()

        for key in keys:
            numeric = numerical_gradient(objective, arrays[key])
            assert relative_error(grads[tensors[key]], numeric) <= 1e-4, key


class TestRescalingGradients:

    @staticmethod
    def _grads(graph, images, labels):
        keys = graph.trainable_keys()
        tensors = {key: Tensor(value, requires_grad=key in keys) for key, value in graph.params.items()}
        with Tape() as tape:
            loss = ops.softmax_cross_entropy(forward(graph, images, "training", tensors).logits, labels)
        grads = tape.backward(loss)
        return {key: grads[tensors[key]] for key in keys}

    @pytest.mark.parametrize("alpha", [0.01, 0.1, 10.0])
    def test_gamma_and_next_kernel_gradients_scale(self, tiny_graph, rng, alpha):
        graph = randomize(tiny_graph, rng)
        images = rng.standard_normal((4, 8, 8, 4))
        labels = np.array([0, 1, 0, 1])
        before = self._grads(graph, images, labels)
        after = self._grads(rescale_gamma_w(graph, alpha), images, labels)

        gamma = param_key("conv1", "gamma")
        kernel = param_key("conv2", "kernel")
        np.testing.assert_allclose(after[gamma], before[gamma] / alpha, rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(after[kernel], before[kernel] * alpha, rtol=1e-6, atol=1e-12)
