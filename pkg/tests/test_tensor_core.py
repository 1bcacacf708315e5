import numpy as np
import pytest

from engine import functional as F
from engine.modules import BatchNorm2d, Conv2d, FullyConnected
from engine.optim import cosine_lr, sgd_step
from engine.tensor import LayerKind, LayerSpec, Parameter, Tensor, same_padding
from utils.errors import ShapeError


def leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestLayerSpec:
    def test_same_padding_splits_floor_before(self):
        assert same_padding((5, 11)) == (2, 2, 5, 5)
        assert same_padding((4, 2)) == (1, 2, 0, 1)

    def test_strided_output_is_ceil_of_input(self):
        spec = LayerSpec(LayerKind.CONV2D, 1, 8, (5, 11), (1, 2))
        assert spec.output_hw(10, 51) == (10, 26)

    def test_depthwise_requires_matching_channels(self):
        with pytest.raises(ShapeError):
            LayerSpec(LayerKind.DEPTHWISE_CONV2D, 4, 8, (3, 3))

    def test_zero_stride_rejected(self):
        with pytest.raises(ShapeError):
            LayerSpec(LayerKind.CONV2D, 1, 1, (3, 3), (0, 1))


class TestConvolution:
    def test_one_by_one_conv_is_channel_matmul(self, rng):
        x = leaf(rng, (2, 3, 4, 5))
        w = leaf(rng, (6, 3, 1, 1))
        out = F.conv2d(x, w, LayerSpec(LayerKind.CONV2D, 3, 6))
        expected = np.einsum("oc,bchw->bohw", w.data[:, :, 0, 0], x.data)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_conv_matches_direct_loop(self, rng):
        spec = LayerSpec(LayerKind.CONV2D, 2, 3, (3, 3), (2, 1))
        x = rng.standard_normal((1, 2, 5, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        out = F.conv2d(Tensor(x), Tensor(w), spec).data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    window = padded[0, :, 2 * i:2 * i + 3, j:j + 3]
                    assert out[0, o, i, j] == pytest.approx(np.sum(window * w[o]))

    def test_conv_gradients(self, rng, gradcheck):
        spec = LayerSpec(LayerKind.CONV2D, 2, 3, (3, 5), (2, 2))
        x, w = leaf(rng, (2, 2, 6, 7)), leaf(rng, (3, 2, 3, 5))
        gradcheck(lambda: F.conv2d(x, w, spec), [x, w])

    def test_depthwise_gradients(self, rng, gradcheck):
        spec = LayerSpec(LayerKind.DEPTHWISE_CONV2D, 3, 3, (3, 3), (2, 2))
        x, w = leaf(rng, (2, 3, 5, 6)), leaf(rng, (3, 1, 3, 3))
        gradcheck(lambda: F.depthwise_conv2d(x, w, spec), [x, w], seed=1)

    def test_wrong_input_channels_named(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            F.conv2d(leaf(rng, (1, 4, 5, 5)), leaf(rng, (2, 3, 1, 1)), LayerSpec(LayerKind.CONV2D, 3, 2))

    def test_depthwise_weight_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            F.depthwise_conv2d(leaf(rng, (1, 4, 5, 5)), leaf(rng, (3, 1, 3, 3)),
                               LayerSpec(LayerKind.DEPTHWISE_CONV2D, 4, 4, (3, 3)))


class TestBatchNorm:
    def test_train_mode_normalizes(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, (8, 2, 3, 3)))
        out = F.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), None, "train")
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)

    def test_running_moments_use_unbiased_variance(self, rng):
        x = rng.standard_normal((4, 1, 2, 2))
        state = F.RunningMoments(1, dtype=np.float64)
        F.batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, "train")
        assert state.mean[0] == pytest.approx(0.1 * x.mean())
        assert state.var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))

    def test_single_sample_train_batch_rejected(self, rng):
        with pytest.raises(ShapeError):
            F.batchnorm(Tensor(rng.standard_normal((1, 2, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None)

    def test_train_gradients(self, rng, gradcheck):
        x, gamma, beta = leaf(rng, (4, 3, 2, 3)), leaf(rng, (3,)), leaf(rng, (3,))
        gradcheck(lambda: F.batchnorm(x, gamma, beta, None, "train"), [x, gamma, beta], seed=2)

    def test_infer_gradients(self, rng, gradcheck):
        state = F.RunningMoments(3, dtype=np.float64)
        state.mean, state.var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
        x, gamma, beta = leaf(rng, (1, 3, 2, 2)), leaf(rng, (3,)), leaf(rng, (3,))
        gradcheck(lambda: F.batchnorm(x, gamma, beta, state, "infer"), [x, gamma, beta], seed=3)

    def test_frozen_module_keeps_moments(self, rng):
        norm = BatchNorm2d(2, dtype=np.float64)
        norm.stats_frozen = True
        norm(Tensor(rng.standard_normal((4, 2, 3, 3))))
        np.testing.assert_array_equal(norm.moments.mean, np.zeros(2))
        np.testing.assert_array_equal(norm.moments.var, np.ones(2))


class TestElementwiseAndHead:
    def test_relu_gradients(self, rng, gradcheck):
        x = leaf(rng, (2, 3, 4, 4))
        gradcheck(lambda: F.relu(x), [x])

    def test_pool_and_fc_gradients(self, rng, gradcheck):
        x, w, b = leaf(rng, (3, 4, 2, 5)), leaf(rng, (6, 4)), leaf(rng, (6,))
        gradcheck(lambda: F.fully_connected(F.global_avg_pool(x), w, b), [x, w, b], seed=4)

    def test_fc_needs_rank_two(self, rng):
        with pytest.raises(ShapeError):
            F.fully_connected(leaf(rng, (2, 3, 1, 1)), leaf(rng, (4, 3)), leaf(rng, (4,)))

    def test_add_gradients(self, rng, gradcheck):
        a, b = leaf(rng, (2, 3)), leaf(rng, (2, 3))
        gradcheck(lambda: F.add(a, b), [a, b])

    def test_cross_entropy_gradient(self, rng, gradcheck):
        logits = leaf(rng, (5, 4))
        labels = rng.integers(0, 4, 5)
        gradcheck(lambda: F.softmax_cross_entropy(logits, labels), [logits])

    def test_cross_entropy_is_stable_for_large_logits(self):
        loss = F.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0])
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_cross_entropy_label_out_of_range(self, rng):
        with pytest.raises(ValueError):
            F.softmax_cross_entropy(leaf(rng, (2, 3)), [0, 3])

    def test_backward_needs_scalar_or_seed(self, rng):
        with pytest.raises(ShapeError):
            F.relu(leaf(rng, (2, 2))).backward()


class TestModulesAndOptim:
    def test_conv_module_chain_gradients(self, rng, gradcheck):
        conv = Conv2d(LayerSpec(LayerKind.CONV2D, 2, 3, (3, 3)), rng, np.float64)
        fc = FullyConnected(3, 2, rng, np.float64)
        x = leaf(rng, (2, 2, 4, 4))
        forward = lambda: fc(F.global_avg_pool(F.relu(conv(x))))
        gradcheck(forward, [x, conv.weight.value, fc.weight.value, fc.bias.value], seed=5)

    def test_sgd_skips_frozen_and_gradless_params(self):
        learnable = Parameter(np.ones(2))
        frozen = Parameter(np.ones(2), learnable=False)
        learnable.value.grad = np.array([1.0, 2.0])
        sgd_step([learnable, frozen], 0.5)
        np.testing.assert_allclose(learnable.data, [0.5, 0.0])
        np.testing.assert_allclose(frozen.data, [1.0, 1.0])

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ValueError):
            sgd_step([], -0.1)

    @pytest.mark.parametrize("step,expected", [(0, 0.2), (50, 0.1), (100, 0.0)])
    def test_cosine_anchors(self, step, expected):
        assert cosine_lr(step, 100, 0.2) == pytest.approx(expected, abs=1e-12)

    def test_cosine_step_outside_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0.1)

    def test_state_dict_round_trip(self, rng):
        conv = Conv2d(LayerSpec(LayerKind.CONV2D, 1, 2, (3, 3)), rng)
        other = Conv2d(LayerSpec(LayerKind.CONV2D, 1, 2, (3, 3)), np.random.default_rng(9))
        other.load_state_dict(conv.state_dict())
        np.testing.assert_array_equal(other.weight.data, conv.weight.data)
