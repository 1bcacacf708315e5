"""Search-space vocabulary and the fixed building blocks of the three-stage network.

Every block is described once as a list of LayerSpecs; the modules and the cost
model are both built from those lists.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from engine import functional as F
from engine.modules import BatchNorm2d, Conv2d, FullyConnected, GlobalAvgPool, Module, ReLU
from engine.tensor import LayerKind, LayerSpec, Tensor

STEM_KERNEL = (5, 11)
STEM_STRIDE = (1, 2)
FIRST_LAYER_STRIDE = (2, 2)


@dataclass(frozen=True)
class CandidateOpSpec:
    variant: str
    e: int = 0
    k: int = 0

    def __post_init__(self):
        if self.variant not in ("zero", "mbc"):
            raise ValueError(f"candidate variant must be 'zero' or 'mbc', got {self.variant!r}")
        if self.variant == "mbc" and (self.e < 1 or self.k < 1):
            raise ValueError(f"mbc candidate needs e >= 1 and k >= 1, got e={self.e} k={self.k}")

    @property
    def is_zero(self) -> bool:
        return self.variant == "zero"

    @property
    def label(self) -> str:
        return "zero" if self.is_zero else f"mbc{self.e}_k{self.k}"


ZERO = CandidateOpSpec("zero")


def candidate_menu(expansion_rates: Sequence[int] = (1, 2, 3, 4, 5, 6),
                   kernel_sizes: Sequence[int] = (3, 5, 7)) -> List[CandidateOpSpec]:
    """Zero plus one MBC per (e, k): 19 entries for the default menu"""
    return [ZERO] + [CandidateOpSpec("mbc", e, k) for e in expansion_rates for k in kernel_sizes]


def conv_bn_relu_specs(in_channels: int, out_channels: int, kernel: Tuple[int, int],
                       stride: Tuple[int, int] = (1, 1)) -> List[LayerSpec]:
    return [
        LayerSpec(LayerKind.CONV2D, in_channels, out_channels, kernel, stride),
        LayerSpec(LayerKind.BATCH_NORM, out_channels, out_channels),
        LayerSpec(LayerKind.RELU, out_channels, out_channels),
    ]


def stem_specs(channels: int) -> List[LayerSpec]:
    return conv_bn_relu_specs(1, channels, STEM_KERNEL, STEM_STRIDE)


def mbc_specs(in_channels: int, out_channels: int, expansion: int, kernel: int,
              stride: Tuple[int, int]) -> List[LayerSpec]:
    """expand 1x1 -> bn -> relu -> depthwise kxk (strided) -> bn -> relu -> project 1x1 -> bn"""
    hidden = in_channels * expansion
    return [
        LayerSpec(LayerKind.CONV2D, in_channels, hidden, (1, 1)),
        LayerSpec(LayerKind.BATCH_NORM, hidden, hidden),
        LayerSpec(LayerKind.RELU, hidden, hidden),
        LayerSpec(LayerKind.DEPTHWISE_CONV2D, hidden, hidden, (kernel, kernel), stride),
        LayerSpec(LayerKind.BATCH_NORM, hidden, hidden),
        LayerSpec(LayerKind.RELU, hidden, hidden),
        LayerSpec(LayerKind.CONV2D, hidden, out_channels, (1, 1)),
        LayerSpec(LayerKind.BATCH_NORM, out_channels, out_channels),
    ]


def head_specs(in_channels: int, head_channels: int, num_classes: int) -> List[LayerSpec]:
    return conv_bn_relu_specs(in_channels, head_channels, (1, 1)) + [
        LayerSpec(LayerKind.GLOBAL_AVG_POOL, head_channels, head_channels),
        LayerSpec(LayerKind.FULLY_CONNECTED, head_channels, num_classes),
    ]


def candidate_specs(op: CandidateOpSpec, in_channels: int, out_channels: int,
                    stride: Tuple[int, int]) -> List[LayerSpec]:
    if op.is_zero:
        return []
    return mbc_specs(in_channels, out_channels, op.e, op.k, stride)


def strided_hw(height: int, width: int, stride: Tuple[int, int]) -> Tuple[int, int]:
    return -(-height // stride[0]), -(-width // stride[1])


def build_layer(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> Module:
    if spec.kind in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D):
        return Conv2d(spec, rng, dtype)
    if spec.kind == LayerKind.BATCH_NORM:
        return BatchNorm2d(spec.out_channels, dtype)
    if spec.kind == LayerKind.RELU:
        return ReLU()
    if spec.kind == LayerKind.GLOBAL_AVG_POOL:
        return GlobalAvgPool()
    if spec.kind == LayerKind.FULLY_CONNECTED:
        return FullyConnected(spec.in_channels, spec.out_channels, rng, dtype)
    raise ValueError(f"no module for layer kind {spec.kind}")


class LayerSequence(Module):
    def __init__(self, specs: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.specs = list(specs)
        self.layers = [build_layer(spec, rng, dtype) for spec in self.specs]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Stem(LayerSequence):
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__(stem_specs(channels), rng, dtype)
        self.channels = channels


class Head(LayerSequence):
    def __init__(self, in_channels: int, head_channels: int, num_classes: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__(head_specs(in_channels, head_channels, num_classes), rng, dtype)


class MbcBlock(LayerSequence):
    """Inverted bottleneck; the skip connection belongs to the layer slot hosting it"""

    def __init__(self, op: CandidateOpSpec, in_channels: int, out_channels: int,
                 stride: Tuple[int, int], rng: np.random.Generator, dtype=np.float32):
        super().__init__(mbc_specs(in_channels, out_channels, op.e, op.k, stride), rng, dtype)
        self.op = op


class ZeroOp(Module):
    def __init__(self, out_channels: int, stride: Tuple[int, int]):
        super().__init__()
        self.op = ZERO
        self.out_channels = out_channels
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        height, width = strided_hw(x.shape[2], x.shape[3], self.stride)
        return F.zeros((x.shape[0], self.out_channels, height, width), dtype=x.data.dtype)


def build_candidate(op: CandidateOpSpec, in_channels: int, out_channels: int,
                    stride: Tuple[int, int], rng: np.random.Generator, dtype=np.float32) -> Module:
    if op.is_zero:
        return ZeroOp(out_channels, stride)
    return MbcBlock(op, in_channels, out_channels, stride, rng, dtype)


class ChosenLayer(Module):
    """A searchable slot after selection: one op, plus the skip when shapes match"""

    def __init__(self, index: int, op_module: Module, skip: bool):
        super().__init__()
        self.index = index
        self.op_module = op_module
        self.skip = skip

    def forward(self, x: Tensor) -> Tensor:
        if self.skip and isinstance(self.op_module, ZeroOp):
            return x
        out = self.op_module(x)
        return F.add(out, x) if self.skip else out
