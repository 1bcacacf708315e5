import struct

import numpy as np
import pytest

from engine import functional as F
from engine.modules import Conv2d, FullyConnected, Module
from engine.tensor import LayerKind, LayerSpec, Parameter, Tensor
from quantization.export import export_packed, import_packed, pack_indices, unpack_indices
from quantization.quantizer import (
    QuantizerSpec,
    clamp,
    post_quantize,
    quantize,
    split_parameter_counts,
    ste_quantize,
    weight_memory_bytes,
)
from utils.errors import CheckpointError

ALL_BITS = range(1, 9)


class TinyNet(Module):
    def __init__(self, rng):
        super().__init__()
        self.conv = Conv2d(LayerSpec(LayerKind.CONV2D, 1, 4, (3, 3)), rng, np.float64)
        self.fc = FullyConnected(4, 3, rng, np.float64)

    def forward(self, x):
        return self.fc(F.global_avg_pool(F.relu(self.conv(x))))


class TestQuantize:
    @pytest.fixture(scope="class")
    def samples(self):
        return np.random.default_rng(7).uniform(-3, 3, 100_000)

    @pytest.mark.parametrize("bits", ALL_BITS)
    def test_outputs_lie_on_the_level_set(self, samples, bits):
        spec = QuantizerSpec(bits)
        out = quantize(samples, spec)
        levels = spec.levels()
        assert np.all(np.min(np.abs(out[:, None] - levels[None, :]), axis=1) < 1e-12)

    @pytest.mark.parametrize("bits", [1, 2, 3, 4])
    def test_every_level_is_reached(self, samples, bits):
        assert np.unique(quantize(samples, QuantizerSpec(bits))).size == 2 ** bits

    @pytest.mark.parametrize("bits", ALL_BITS)
    def test_idempotent(self, samples, bits):
        spec = QuantizerSpec(bits)
        once = quantize(samples, spec)
        np.testing.assert_array_equal(quantize(once, spec), once)

    @pytest.mark.parametrize("bits", ALL_BITS)
    def test_monotone_on_sorted_inputs(self, samples, bits):
        out = quantize(np.sort(samples), QuantizerSpec(bits))
        assert np.all(np.diff(out) >= 0)

    @pytest.mark.parametrize("bits", ALL_BITS)
    def test_zero_never_emitted_and_unit_fixed_points(self, samples, bits):
        spec = QuantizerSpec(bits)
        assert not np.any(quantize(samples, spec) == 0)
        assert quantize(1.0, spec) == 1.0
        assert quantize(-1.0, spec) == -1.0

    def test_hand_anchors(self):
        assert quantize(0.3, QuantizerSpec(1)) == 1.0
        assert quantize(0.0, QuantizerSpec(2)) == pytest.approx(1 / 3)
        assert quantize(-0.3, QuantizerSpec(1)) == -1.0

    def test_bits_out_of_range(self):
        with pytest.raises(ValueError):
            QuantizerSpec(0)
        with pytest.raises(ValueError):
            QuantizerSpec(9)

    def test_clamp(self):
        assert clamp(5, 0, 3) == 3
        np.testing.assert_array_equal(clamp(np.array([-2.0, 0.5]), -1, 1), [-1.0, 0.5])
        with pytest.raises(ValueError):
            clamp(0, 2, 1)


class TestStraightThrough:
    def test_forward_is_quantized_backward_is_identity(self, rng):
        param = Parameter(rng.uniform(-2, 2, (3, 4)), quantize=True)
        out = ste_quantize(param, QuantizerSpec(2))
        np.testing.assert_array_equal(out.data, quantize(param.data, QuantizerSpec(2)))
        seed = rng.standard_normal((3, 4))
        out.backward(seed)
        np.testing.assert_array_equal(param.grad, seed)

    def test_unflagged_parameter_rejected(self):
        with pytest.raises(ValueError):
            ste_quantize(Parameter(np.zeros(2)), QuantizerSpec(4))

    def test_upstream_gradients_bit_identical_with_and_without_ste(self, rng):
        """With weights already on the grid, inserting STE changes nothing upstream"""
        spec = QuantizerSpec(3)
        net = TinyNet(rng)
        post_quantize(net, spec)
        x = Tensor(rng.standard_normal((4, 1, 5, 5)), requires_grad=True)
        labels = np.array([0, 1, 2, 1])

        def grads(quantizer):
            net.zero_grad()
            x.zero_grad()
            net.set_quantizer(quantizer)
            F.softmax_cross_entropy(net(x), labels).backward()
            return [x.grad.copy()] + [p.grad.copy() for p in net.parameters()]

        for plain, ste in zip(grads(None), grads(spec)):
            np.testing.assert_array_equal(plain, ste)


class TestMemoryAccounting:
    def test_post_quantize_skips_exempt_parameters(self, rng):
        net = TinyNet(rng)
        bias = net.fc.bias.data.copy() + 0.123
        net.fc.bias.data = bias
        post_quantize(net, QuantizerSpec(1))
        assert set(np.unique(net.conv.weight.data)) <= {-1.0, 1.0}
        np.testing.assert_array_equal(net.fc.bias.data, bias)

    def test_split_counts(self, rng):
        net = TinyNet(rng)
        assert split_parameter_counts(net.parameters()) == (4 * 9 + 3 * 4, 3)

    def test_one_bit_is_an_eighth_of_eight_bits(self, rng):
        net = TinyNet(rng)
        assert weight_memory_bytes(net, QuantizerSpec(1)) == weight_memory_bytes(net, QuantizerSpec(8)) / 8

    def test_exempt_parameters_cost_four_bytes(self, rng):
        net = TinyNet(rng)
        spec = QuantizerSpec(4)
        assert weight_memory_bytes(net, spec, include_exempt=True) == weight_memory_bytes(net, spec) + 3 * 4


class TestPackedExport:
    @pytest.mark.parametrize("bits", [1, 3, 8])
    def test_index_packing(self, rng, bits):
        indices = rng.integers(0, 2 ** bits, 37)
        payload = pack_indices(indices, bits)
        assert len(payload) == -(-37 * bits // 8)
        np.testing.assert_array_equal(unpack_indices(payload, 37, bits), indices)

    def test_export_restores_quantized_weights(self, rng, tmp_path):
        net = TinyNet(rng)
        spec = QuantizerSpec(2)
        path = export_packed(net, spec, tmp_path / "weights.kwsq")
        bits, weights = import_packed(path)
        assert bits == 2
        assert set(weights) == {"conv.weight", "fc.weight"}
        np.testing.assert_allclose(weights["conv.weight"], quantize(net.conv.weight.data, spec))

    def test_every_tensor_header_carries_its_bit_width(self, rng, tmp_path):
        path = export_packed(TinyNet(rng), QuantizerSpec(3), tmp_path / "weights.kwsq")
        raw = bytearray(path.read_bytes())
        (name_len,) = struct.unpack_from("<H", raw, 12)
        rank_at = 14 + name_len
        bits_at = rank_at + 1 + 4 * raw[rank_at]
        assert raw[bits_at] == 3

        raw[bits_at] = 4
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="bits"):
            import_packed(path)
