import numpy as np
import pytest

from conftest import gradient, numeric_gradient, relative_error
from core.errors import (ContractViolation, DegenerateBatchError, EmptyTargetError, InvalidLabelError,
                         ShapeError, UnsupportedOperationError)
from core.functional import (BatchNormState, batchnorm2d, bilinear_upsample, conv2d,
                             softmax_cross_entropy_map)
from core.tensor import ComputationTape, Tensor, backward, concat, global_avg_pool, mask_mul, mul, relu, tensor_sum

SEEDS = range(20)


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tensor_sum(mask_mul(out, weights))


class TestTensorBasics:

    def test_data_is_double(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)

    def test_item_needs_single_element(self):
        with pytest.raises(ContractViolation):
            Tensor(np.zeros(3)).item()

    def test_accumulate_grad_checks_shape(self):
        t = Tensor(np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            t.accumulate_grad(np.zeros(3))

    def test_no_recording_without_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        out = relu(x)
        assert not out.requires_grad

    def test_no_recording_without_requires_grad(self):
        with ComputationTape() as tape:
            relu(Tensor(np.ones(3)))
        assert len(tape) == 0


class TestBackward:

    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 5)), requires_grad=True)
        with ComputationTape() as tape:
            root = tensor_sum(x)
        backward(tape, root)
        np.testing.assert_array_equal(x.grad, np.ones(x.shape))

    def test_square_gives_twice_x(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
        with ComputationTape() as tape:
            root = tensor_sum(mul(x, x))
        backward(tape, root)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)

    def test_repeated_calls_accumulate(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        with ComputationTape() as tape:
            root = tensor_sum(mul(x, x))
        backward(tape, root)
        backward(tape, root)
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_non_scalar_root(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with ComputationTape() as tape:
            out = relu(x)
        with pytest.raises(ContractViolation):
            backward(tape, out)

    def test_root_must_be_on_tape(self):
        with ComputationTape() as tape:
            pass
        with pytest.raises(ContractViolation):
            backward(tape, Tensor(1.0))

    def test_concat_and_pool_gradients(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(2, 2, 3, 3)))
        b = Tensor(rng.normal(size=(2, 3, 3, 3)))
        w = rng.normal(size=(2, 5, 1, 1))
        loss = lambda: weighted_sum(global_avg_pool(concat([a, b], axis=1)), w)
        for t in (a, b):
            assert relative_error(gradient(loss, t), numeric_gradient(loss, t)) < 1e-6


class TestConv2d:

    def test_one_by_one_kernel_scales(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor([[[[2.0]]]]), np.zeros(1))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_zero_weights(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 7, 7)))
        out = conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), np.zeros(4), stride=2, padding=1)
        assert out.shape == (2, 4, 4, 4)
        assert not out.data.any()

    @pytest.mark.parametrize("h, k, stride, padding, dilation, expected", [
        (8, 3, 1, 0, 1, 6), (8, 3, 2, 1, 1, 4), (8, 3, 1, 2, 2, 8), (9, 1, 2, 0, 1, 5),
    ])
    def test_output_extent(self, h, k, stride, padding, dilation, expected):
        x = Tensor(np.zeros((1, 1, h, h)))
        out = conv2d(x, Tensor(np.zeros((1, 1, k, k))), stride=stride, padding=padding, dilation=dilation)
        assert out.shape[2:] == (expected, expected)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as info:
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        assert "(1, 2, 4, 4)" in str(info.value) and "(1, 3, 3, 3)" in str(info.value)

    def test_linearity(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        x, y = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(2, 2, 6, 6))
        lhs = conv2d(Tensor(2.5 * x - 1.5 * y), w, padding=1, dilation=1).data
        rhs = 2.5 * conv2d(Tensor(x), w, padding=1).data - 1.5 * conv2d(Tensor(y), w, padding=1).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)

    def test_dilated_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(2, 4, 8, 8)))
        w = Tensor(rng.normal(size=(6, 4, 3, 3)))
        b = Tensor(rng.normal(size=6))
        loss = lambda: tensor_sum(conv2d(x, w, b, padding=2, dilation=2))
        for t in (x, w, b):
            assert relative_error(gradient(loss, t), numeric_gradient(loss, t, eps=1e-5)) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient_random_shapes(self, seed):
        rng = np.random.default_rng(seed)
        c_in, c_out = rng.integers(1, 4, size=2)
        stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        x = Tensor(rng.normal(size=(2, c_in, 7, 7)))
        w = Tensor(rng.normal(size=(c_out, c_in, 3, 3)))
        out_shape = conv2d(x, w, stride=stride, padding=dilation, dilation=dilation).shape
        weights = rng.normal(size=out_shape)
        loss = lambda: weighted_sum(conv2d(x, w, stride=stride, padding=dilation, dilation=dilation), weights)
        for t in (x, w):
            assert relative_error(gradient(loss, t), numeric_gradient(loss, t)) < 1e-4


class TestBatchNorm:

    def test_fixed_point(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = batchnorm2d(Tensor(x), BatchNormState(3, eps=1e-12))
        np.testing.assert_allclose(out.data, x, atol=1e-6)

    def test_training_statistics(self):
        rng = np.random.default_rng(6)
        state = BatchNormState(2, eps=1e-12)
        state.gamma.data[:] = [2.0, 0.5]
        state.beta.data[:] = [1.0, -3.0]
        out = batchnorm2d(Tensor(rng.normal(3.0, 4.0, size=(3, 2, 6, 6))), state).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), [1.0, -3.0], atol=1e-6)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), [4.0, 0.25], atol=1e-4)

    def test_running_stats_update(self):
        rng = np.random.default_rng(7)
        x = rng.normal(2.0, 3.0, size=(2, 1, 4, 4))
        state = BatchNormState(1, momentum=0.1)
        batchnorm2d(Tensor(x), state)
        m = x.size
        np.testing.assert_allclose(state.running_mean, [0.1 * x.mean()])
        np.testing.assert_allclose(state.running_var, [0.9 + 0.1 * x.var() * m / (m - 1)])

    def test_inference_constant_channel(self):
        state = BatchNormState(1)
        state.running_mean[:] = 4.0
        state.train(False)
        out = batchnorm2d(Tensor(np.full((2, 1, 3, 3), 4.0)), state)
        np.testing.assert_array_equal(out.data, np.zeros((2, 1, 3, 3)))

    def test_inference_leaves_running_stats(self):
        state = BatchNormState(2)
        state.train(False)
        batchnorm2d(Tensor(np.random.default_rng(8).normal(size=(2, 2, 3, 3))), state)
        np.testing.assert_array_equal(state.running_mean, np.zeros(2))
        np.testing.assert_array_equal(state.running_var, np.ones(2))

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatchError):
            batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), BatchNormState(2))

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("training", [True, False])
    def test_gradient(self, seed, training):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3, 3, 4)))
        state = BatchNormState(3)
        state.gamma.data[:] = rng.uniform(0.5, 2.0, 3)
        state.beta.data[:] = rng.normal(size=3)
        state.running_mean[:] = rng.normal(size=3)
        state.running_var[:] = rng.uniform(0.5, 2.0, 3)
        state.train(training)
        weights = rng.normal(size=x.shape)
        loss = lambda: weighted_sum(batchnorm2d(x, state), weights)
        for t in (x, state.gamma, state.beta):
            assert relative_error(gradient(loss, t), numeric_gradient(loss, t)) < 1e-4


class TestBilinearUpsample:

    def test_constant_stays_constant(self):
        out = bilinear_upsample(Tensor(np.full((1, 2, 3, 5), 7.25)), 7, 11)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 7, 11), 7.25))

    def test_single_pixel(self):
        out = bilinear_upsample(Tensor([[[[3.0]]]]), 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 3.0))

    def test_downsample_rejected(self):
        with pytest.raises(UnsupportedOperationError):
            bilinear_upsample(Tensor(np.zeros((1, 1, 4, 4))), 2, 8)

    def test_align_corners_false(self):
        out = bilinear_upsample(Tensor(np.array([[[[0.0, 1.0]]]])), 1, 4)
        np.testing.assert_allclose(out.data.ravel(), [0.0, 0.25, 0.75, 1.0])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        weights = rng.normal(size=(1, 2, 9, 9))
        loss = lambda: weighted_sum(bilinear_upsample(x, 9, 9), weights)
        assert relative_error(gradient(loss, x), numeric_gradient(loss, x)) < 1e-4


class TestSoftmaxCrossEntropy:

    def test_uniform_logits(self):
        loss = softmax_cross_entropy_map(Tensor(np.zeros((2, 2, 3, 3))), np.ones((2, 3, 3), dtype=int))
        assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturated_correct(self):
        target = np.random.default_rng(0).integers(0, 3, size=(1, 4, 4))
        logits = np.zeros((1, 3, 4, 4))
        np.put_along_axis(logits, target[:, None], 30.0, axis=1)
        assert softmax_cross_entropy_map(Tensor(logits), target).item() < 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(2, 4, 3, 3))
        target = rng.integers(0, 4, size=(2, 3, 3))
        shifted = logits + rng.normal(scale=50.0, size=(2, 1, 3, 3))
        a = softmax_cross_entropy_map(Tensor(logits), target).item()
        b = softmax_cross_entropy_map(Tensor(shifted), target).item()
        assert abs(a - b) < 1e-10

    def test_ignored_pixels_have_zero_gradient(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(1, 3, 2, 2)))
        target = np.array([[[0, 255], [2, 255]]])
        grad = gradient(lambda: softmax_cross_entropy_map(logits, target), logits)
        assert not grad[0, :, :, 1].any()

    def test_all_ignored(self):
        with pytest.raises(EmptyTargetError):
            softmax_cross_entropy_map(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 255))

    def test_label_out_of_range(self):
        with pytest.raises(InvalidLabelError):
            softmax_cross_entropy_map(Tensor(np.zeros((1, 2, 2, 2))), np.array([[[0, 1], [2, 0]]]))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.normal(size=(1, 3, 2, 2)))
        target = rng.integers(0, 3, size=(1, 2, 2))
        loss = lambda: softmax_cross_entropy_map(logits, target)
        assert relative_error(gradient(loss, logits), numeric_gradient(loss, logits)) < 1e-4


class TestCompositeGraph:

    @pytest.mark.parametrize("seed", range(5))
    def test_conv_batchnorm_relu_loss(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 5, 5)))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        state = BatchNormState(3)
        target = rng.integers(0, 3, size=(2, 5, 5))

        def loss():
            return softmax_cross_entropy_map(relu(batchnorm2d(conv2d(x, w, padding=1), state)), target)

        for t in (x, w, state.gamma):
            assert relative_error(gradient(loss, t), numeric_gradient(loss, t)) < 1e-4
