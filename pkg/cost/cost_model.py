"""Operation and weight-memory accounting.

Convention: one multiply-accumulate counts as 2 ops. Batch norm, ReLU and global
pooling cost C*H*W each. Skip additions are not counted.
"""

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import TradeoffConfig
from engine.tensor import LayerKind, LayerSpec
from quantization.quantizer import FULL_PRECISION_BYTES
from supernet.blocks import CandidateOpSpec, candidate_specs, head_specs, stem_specs
from utils.errors import CostModelError

if TYPE_CHECKING:
    from supernet.architecture import ArchitectureDescription
    from supernet.supernet import Supernet

FULL_PRECISION_BITS = 32


@dataclass(frozen=True)
class OpCost:
    ops: int = 0
    weights: int = 0
    exempt_weights: int = 0
    bits: int = FULL_PRECISION_BITS

    @property
    def bytes(self) -> float:
        """Quantized weight storage, exempt parameters excluded"""
        return self.weights * self.bits / 8

    @property
    def bytes_with_exempt(self) -> float:
        return self.bytes + self.exempt_weights * FULL_PRECISION_BYTES

    def with_bits(self, bits: Optional[int]) -> "OpCost":
        return replace(self, bits=FULL_PRECISION_BITS if bits is None else bits)

    def __add__(self, other: "OpCost") -> "OpCost":
        return OpCost(self.ops + other.ops, self.weights + other.weights,
                      self.exempt_weights + other.exempt_weights, self.bits)


def layer_cost(spec: LayerSpec, in_hw: Tuple[int, int]) -> Tuple[OpCost, Tuple[int, int]]:
    height, width = in_hw
    out_h, out_w = spec.output_hw(height, width)
    if spec.kind == LayerKind.CONV2D:
        kh, kw = spec.kernel
        macs = spec.out_channels * out_h * out_w * spec.in_channels * kh * kw
        return OpCost(ops=2 * macs, weights=spec.out_channels * spec.in_channels * kh * kw), (out_h, out_w)
    if spec.kind == LayerKind.DEPTHWISE_CONV2D:
        kh, kw = spec.kernel
        macs = spec.out_channels * out_h * out_w * kh * kw
        return OpCost(ops=2 * macs, weights=spec.out_channels * kh * kw), (out_h, out_w)
    if spec.kind == LayerKind.BATCH_NORM:
        return OpCost(ops=spec.out_channels * height * width, exempt_weights=2 * spec.out_channels), in_hw
    if spec.kind in (LayerKind.RELU, LayerKind.GLOBAL_AVG_POOL):
        return OpCost(ops=spec.out_channels * height * width), in_hw
    if spec.kind == LayerKind.FULLY_CONNECTED:
        return (OpCost(ops=2 * spec.in_channels * spec.out_channels,
                       weights=spec.in_channels * spec.out_channels,
                       exempt_weights=spec.out_channels), (1, 1))
    raise CostModelError(f"no cost rule for {spec.kind}")


def sequence_cost(specs: Sequence[LayerSpec], in_hw: Tuple[int, int]) -> Tuple[OpCost, Tuple[int, int]]:
    total = OpCost()
    hw = in_hw
    for spec in specs:
        cost, hw = layer_cost(spec, hw)
        total = total + cost
    return total, hw


def candidate_cost(spec: CandidateOpSpec, in_shape: Tuple[int, int, int], channels: int,
                   stride: Tuple[int, int]) -> OpCost:
    in_channels, height, width = in_shape
    cost, _ = sequence_cost(candidate_specs(spec, in_channels, channels, stride), (height, width))
    return cost


def fixed_stage_cost(num_mfcc: int, num_frames: int, stem_channels: int, last_channels: int,
                     head_channels: int, num_classes: int, body_hw: Tuple[int, int]) -> OpCost:
    """Stem cost from the feature grid plus head cost from the grid left after the searchable layers"""
    stem, _ = sequence_cost(stem_specs(stem_channels), (num_mfcc, num_frames))
    head, _ = sequence_cost(head_specs(last_channels, head_channels, num_classes), body_hw)
    return stem + head


def expected_ops(supernet: "Supernet") -> float:
    """Fixed stages plus, per searchable layer, sum_i p_i * ops(o_i)"""
    total = float(supernet.fixed_cost.ops)
    for layer in supernet.layers:
        total += float(np.dot(layer.choice.probs, layer.candidate_ops))
    return total


def regularizer(ops_exp: float, cfg: TradeoffConfig) -> float:
    """(log ops_exp / log ops_target) ** beta"""
    if ops_exp <= 1:
        raise CostModelError(f"expected ops must exceed 1 for the log ratio, got {ops_exp}")
    if cfg.beta == 0:
        return 1.0
    return (math.log(ops_exp) / math.log(cfg.ops_target)) ** cfg.beta


def regularizer_derivative(ops_exp: float, cfg: TradeoffConfig) -> float:
    """d/d(ops_exp) of the regularizer"""
    if ops_exp <= 1:
        raise CostModelError(f"expected ops must exceed 1 for the log ratio, got {ops_exp}")
    if cfg.beta == 0:
        return 0.0
    log_target = math.log(cfg.ops_target)
    ratio = math.log(ops_exp) / log_target
    return cfg.beta * ratio ** (cfg.beta - 1) / (ops_exp * log_target)


def tradeoff_loss(ce: float, ops_exp: float, cfg: TradeoffConfig) -> float:
    if ce < 0:
        raise CostModelError(f"cross entropy must be >= 0, got {ce}")
    return ce * regularizer(ops_exp, cfg)


def arch_loss(ce: float, supernet: "Supernet", cfg: TradeoffConfig) -> float:
    """CE * (log(ops_exp) / log(ops_target)) ** beta"""
    return tradeoff_loss(ce, expected_ops(supernet), cfg)


def arch_loss_alpha_grads(ce: float, supernet: "Supernet", cfg: TradeoffConfig) -> List[np.ndarray]:
    """Gradient of arch_loss w.r.t. every layer's alphas with CE held constant"""
    ops_exp = expected_ops(supernet)
    scale = ce * regularizer_derivative(ops_exp, cfg)
    grads = []
    for layer in supernet.layers:
        grad_p = scale * layer.candidate_ops
        grads.append(softmax_backward(layer.choice.probs, grad_p))
    return grads


def softmax_backward(probs: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """dL/dalpha_i = sum_j dL/dp_j * p_j * (delta_ij - p_i)"""
    return probs * (grad_p - np.dot(probs, grad_p))


def model_cost(arch: "ArchitectureDescription", bits: Optional[int]) -> OpCost:
    """Exact ops and weight counts for one inference of a derived architecture"""
    stem, hw = sequence_cost(stem_specs(arch.stem_channels), (arch.num_mfcc, arch.num_frames))
    total = stem
    channels = arch.stem_channels
    for layer in arch.layers:
        cost, hw = sequence_cost(candidate_specs(layer.op, channels, layer.channels, layer.stride), hw)
        if layer.op.is_zero:
            hw = (-(-hw[0] // layer.stride[0]), -(-hw[1] // layer.stride[1]))
        total = total + cost
        channels = layer.channels
    head, _ = sequence_cost(head_specs(channels, arch.head_channels, arch.num_classes), hw)
    return (total + head).with_bits(bits)
