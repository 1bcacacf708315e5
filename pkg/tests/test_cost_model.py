import itertools
import math

import numpy as np
import pytest

from config.settings import SupernetConfig, TradeoffConfig
from cost.cost_model import (
    arch_loss,
    arch_loss_alpha_grads,
    candidate_cost,
    expected_ops,
    fixed_stage_cost,
    layer_cost,
    model_cost,
    softmax_backward,
    tradeoff_loss,
)
from engine.tensor import LayerKind, LayerSpec
from supernet.architecture import ArchitectureDescription, LayerDescription
from supernet.blocks import ZERO, CandidateOpSpec, candidate_menu, candidate_specs, head_specs, stem_specs
from supernet.supernet import Supernet, derive_architecture
from utils.errors import CostModelError


def loop_nest_ops(spec: LayerSpec, c: int, h: int, w: int):
    """Count every multiply and add of a direct loop implementation"""
    out_h, out_w = spec.output_hw(h, w)
    ops = 0
    if spec.kind == LayerKind.CONV2D:
        for _o, _i, _j in itertools.product(range(spec.out_channels), range(out_h), range(out_w)):
            ops += 2 * spec.in_channels * spec.kernel[0] * spec.kernel[1]
    elif spec.kind == LayerKind.DEPTHWISE_CONV2D:
        for _o, _i, _j in itertools.product(range(spec.out_channels), range(out_h), range(out_w)):
            ops += 2 * spec.kernel[0] * spec.kernel[1]
    else:
        ops += c * h * w
    return ops, (spec.out_channels, out_h, out_w)


def small_supernet(rng, num_layers=2, menu=None):
    cfg = SupernetConfig(base_channels=8, num_layers=num_layers, num_classes=3)
    return Supernet(cfg, num_mfcc=10, num_frames=51, rng=rng, menu=menu)


class TestCandidateCost:
    def test_zero_is_free(self):
        cost = candidate_cost(ZERO, (8, 4, 4), 8, (1, 1))
        assert (cost.ops, cost.weights) == (0, 0)

    def test_hand_counted_pointwise_conv(self):
        cost, hw = layer_cost(LayerSpec(LayerKind.CONV2D, 8, 8), (4, 4))
        assert (cost.ops, cost.weights, hw) == (2048, 64, (4, 4))

    @pytest.mark.parametrize("op", candidate_menu())
    @pytest.mark.parametrize("stride", [(1, 1), (2, 2)])
    def test_matches_loop_nest_count(self, op, stride):
        cost = candidate_cost(op, (4, 6, 6), 4, stride)
        total, shape = 0, (4, 6, 6)
        for spec in candidate_specs(op, 4, 4, stride):
            ops, shape = loop_nest_ops(spec, *shape)
            total += ops
        assert cost.ops == total

    def test_batch_norm_parameters_are_exempt(self):
        cost, _ = layer_cost(LayerSpec(LayerKind.BATCH_NORM, 16, 16), (3, 3))
        assert (cost.ops, cost.weights, cost.exempt_weights) == (144, 0, 32)


class TestExpectedOps:
    def test_hand_weighted_layer(self, rng):
        net = small_supernet(rng, num_layers=1, menu=[ZERO, CandidateOpSpec("mbc", 1, 3)])
        layer = net.layers[0]
        layer.candidate_ops = np.array([100.0, 300.0])
        layer.choice.alphas = np.log(np.array([0.25, 0.75]))
        assert expected_ops(net) == pytest.approx(net.fixed_cost.ops + 250.0)

    def test_degenerate_probs_equal_derived_cost(self, rng):
        net = small_supernet(rng)
        for choice, i in zip(net.choices, (5, 11)):
            choice.alphas[:] = -200.0
            choice.alphas[i] = 0.0
        arch = derive_architecture(net)
        assert expected_ops(net) == pytest.approx(model_cost(arch, 8).ops, rel=1e-12)

    def test_matches_full_enumeration(self, rng):
        menu = [ZERO, CandidateOpSpec("mbc", 1, 3), CandidateOpSpec("mbc", 3, 5)]
        net = small_supernet(rng, menu=menu)
        for _ in range(50):
            for choice in net.choices:
                choice.alphas = rng.normal(0, 2, 3)
            total = 0.0
            for config in itertools.product(range(3), repeat=2):
                prob = np.prod([c.probs[i] for c, i in zip(net.choices, config)])
                arch = derive_architecture(net, config)
                total += prob * model_cost(arch, None).ops
            assert expected_ops(net) == pytest.approx(total, rel=1e-9)


class TestTradeoffLoss:
    def test_on_target_loss_equals_ce(self):
        assert tradeoff_loss(0.7, 20e6, TradeoffConfig(beta=8, ops_target=20e6)) == pytest.approx(0.7)

    def test_zero_beta_ignores_ops(self):
        assert tradeoff_loss(0.7, 1e9, TradeoffConfig(beta=0, ops_target=20e6)) == 0.7

    def test_log_ratio_anchor(self):
        assert tradeoff_loss(1.0, 1e9, TradeoffConfig(beta=1, ops_target=1e6)) == pytest.approx(1.5, abs=1e-9)

    def test_non_positive_log_rejected(self):
        with pytest.raises(CostModelError):
            tradeoff_loss(1.0, 1.0, TradeoffConfig())

    def test_monotone_around_target(self):
        cfg = TradeoffConfig(beta=4, ops_target=1e6)
        above = [tradeoff_loss(1.0, ops, cfg) for ops in (2e6, 4e6, 8e6)]
        below = [tradeoff_loss(1.0, ops, cfg) for ops in (1e5, 2e5, 4e5)]
        assert above == sorted(above) and below == sorted(below)

    def test_alpha_gradient_matches_finite_differences(self, rng):
        net = small_supernet(rng)
        cfg = TradeoffConfig(beta=4, ops_target=1e5)
        for choice in net.choices:
            choice.alphas = rng.normal(0, 1, choice.size)
        ce = 0.8
        analytic = arch_loss_alpha_grads(ce, net, cfg)
        eps = 1e-6
        for layer_index, choice in enumerate(net.choices):
            assert analytic[layer_index].sum() == pytest.approx(0.0, abs=1e-10)
            for i in range(choice.size):
                original = choice.alphas[i]
                choice.alphas[i] = original + eps
                plus = arch_loss(ce, net, cfg)
                choice.alphas[i] = original - eps
                minus = arch_loss(ce, net, cfg)
                choice.alphas[i] = original
                numeric = (plus - minus) / (2 * eps)
                assert analytic[layer_index][i] == pytest.approx(numeric, rel=1e-4, abs=1e-9)

    def test_softmax_backward_sums_to_zero(self, rng):
        probs = np.exp(rng.normal(size=19))
        probs /= probs.sum()
        assert softmax_backward(probs, rng.normal(size=19)).sum() == pytest.approx(0.0, abs=1e-12)


class TestModelCost:
    @pytest.fixture
    def arch(self):
        layers = (
            LayerDescription(0, CandidateOpSpec("mbc", 6, 3), (2, 2), 72),
            LayerDescription(1, ZERO, (1, 1), 72),
            LayerDescription(2, CandidateOpSpec("mbc", 3, 7), (1, 1), 72),
        )
        return ArchitectureDescription(10, 51, 1.0, 12, 72, 144, layers)

    def test_stage_only_architecture(self):
        layers = (LayerDescription(0, ZERO, (2, 2), 72), LayerDescription(1, ZERO, (1, 1), 72))
        arch = ArchitectureDescription(10, 51, 1.0, 12, 72, 144, layers)
        expected = fixed_stage_cost(10, 51, 72, 72, 144, 12, (5, 13))
        assert model_cost(arch, 8).ops == expected.ops

    def test_fixed_stage_hand_count(self):
        # stem conv on 10x26 output, bn + relu, head 1x1 conv on 5x13, bn + relu + pool, fc
        stem = 2 * 72 * 10 * 26 * 1 * 5 * 11 + 2 * 72 * 10 * 26
        head = 2 * 144 * 5 * 13 * 72 + 3 * 144 * 5 * 13 + 2 * 144 * 12
        assert fixed_stage_cost(10, 51, 72, 72, 144, 12, (5, 13)).ops == stem + head

    def test_one_bit_bytes_are_an_eighth(self, arch):
        assert model_cost(arch, 1).bytes == model_cost(arch, 8).bytes / 8

    def test_ops_do_not_depend_on_bits(self, arch):
        assert model_cost(arch, 1).ops == model_cost(arch, 8).ops == model_cost(arch, None).ops

    def test_weights_match_built_network(self, arch, rng):
        from assembly.model_assembler import KwsNetwork
        from quantization.quantizer import split_parameter_counts
        network = KwsNetwork.from_architecture(arch, rng)
        cost = model_cost(arch, 8)
        assert split_parameter_counts(network.parameters()) == (cost.weights, cost.exempt_weights)

    def test_specs_cover_both_fixed_stages(self):
        assert len(stem_specs(8)) == 3
        assert [spec.kind for spec in head_specs(8, 16, 3)][-2:] == [LayerKind.GLOBAL_AVG_POOL, LayerKind.FULLY_CONNECTED]

    def test_cost_is_additive(self, arch):
        total = model_cost(arch, 8)
        assert total.ops > fixed_stage_cost(10, 51, 72, 72, 144, 12, (5, 13)).ops
        assert math.isclose(total.bytes_with_exempt - total.bytes, total.exempt_weights * 4)
