"""The overparameterized three-stage network searched over.

Stage one (stem) and stage three (head) are fixed. Stage two is a stack of
searchable layers, each holding every candidate of the menu behind a one-hot gate
drawn from softmax(alphas).
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.settings import SupernetConfig
from cost.cost_model import candidate_cost, fixed_stage_cost
from engine import functional as F
from engine.modules import Module
from engine.tensor import Tensor
from supernet.architecture import ArchitectureDescription, LayerDescription
from supernet.blocks import (
    FIRST_LAYER_STRIDE,
    CandidateOpSpec,
    Head,
    Stem,
    build_candidate,
    candidate_menu,
    stem_specs,
    strided_hw,
)
from utils.errors import ShapeError

MIN_CHANNELS = 8


def apply_channel_multiplier(base_channels: int, omega: float) -> int:
    """Nearest multiple of 8 to base * omega, ties rounded up, never below 8"""
    if base_channels <= 0 or omega <= 0:
        raise ValueError(f"need base_channels > 0 and omega > 0, got {base_channels}, {omega}")
    return max(MIN_CHANNELS, int(math.floor(base_channels * omega / MIN_CHANNELS + 0.5)) * MIN_CHANNELS)


@dataclass
class LayerChoice:
    """Architecture parameters of one searchable layer"""

    alphas: np.ndarray
    gate: Optional[np.ndarray] = None
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.alphas)

    @classmethod
    def uniform(cls, num_candidates: int) -> "LayerChoice":
        return cls(np.zeros(num_candidates))

    @property
    def size(self) -> int:
        return int(self.alphas.size)

    @property
    def probs(self) -> np.ndarray:
        return softmax_probs(self)

    @property
    def active(self) -> int:
        if self.gate is None:
            raise ValueError("no gate has been sampled for this layer")
        return int(np.argmax(self.gate))

    def set_active(self, index: int) -> None:
        if not 0 <= index < self.size:
            raise IndexError(f"candidate index {index} outside [0, {self.size})")
        self.gate = np.zeros(self.size)
        self.gate[index] = 1.0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.alphas)


def softmax_probs(choice: LayerChoice) -> np.ndarray:
    shifted = np.exp(choice.alphas - choice.alphas.max())
    return shifted / shifted.sum()


def sample_gate(choice: LayerChoice, rng: np.random.Generator, uniform: bool = False) -> np.ndarray:
    """Draw one candidate with probability p_i (or 1/N when uniform) and set the one-hot gate"""
    probs = None if uniform else choice.probs
    choice.set_active(int(rng.choice(choice.size, p=probs)))
    return choice.gate


class SearchableLayer(Module):
    def __init__(self, index: int, menu: Sequence[CandidateOpSpec], in_channels: int, out_channels: int,
                 stride: Tuple[int, int], in_hw: Tuple[int, int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.index = index
        self.menu = list(menu)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.in_hw = in_hw
        self.out_hw = strided_hw(in_hw[0], in_hw[1], stride)
        self.skip = stride == (1, 1) and in_channels == out_channels
        self.candidates = [build_candidate(op, in_channels, out_channels, stride, rng, dtype) for op in self.menu]
        self.choice = LayerChoice.uniform(len(self.menu))
        self.candidate_costs = [candidate_cost(op, (in_channels,) + tuple(in_hw), out_channels, stride)
                                for op in self.menu]
        self.candidate_ops = np.array([float(cost.ops) for cost in self.candidate_costs])
        self.last_outputs: List[np.ndarray] = []

    def forward(self, x: Tensor, mode: str = "sampled") -> Tensor:
        if mode not in ("sampled", "all"):
            raise ValueError(f"forward mode must be 'sampled' or 'all', got {mode!r}")
        active = self.choice.active
        if mode == "sampled":
            self.last_outputs = []
            if self.menu[active].is_zero and self.skip:
                return x
            out = self.candidates[active](x)
        else:
            out = self._mixed(x, active)
        return F.add(out, x) if self.skip else out

    def _mixed(self, x: Tensor, active: int) -> Tensor:
        """sum_j g_j * o_j(x) with one-hot g; backward also fills dL/dg_j = <dL/dm, o_j(x)>"""
        outputs = [candidate(x) for candidate in self.candidates]
        expected = outputs[active].shape
        for op, output in zip(self.menu, outputs):
            if output.shape != expected:
                raise ShapeError(f"layer {self.index}: candidate {op.label} output {output.shape} != {expected}")
        self.last_outputs = [output.data for output in outputs]

        chosen = outputs[active]
        choice = self.choice
        mixed = Tensor(chosen.data, requires_grad=True, _children=(chosen,), _op="mixed_op")

        def backward() -> None:
            grad = mixed.grad
            chosen.accumulate(grad)
            choice.grad += np.array([float(np.sum(grad * o)) for o in self.last_outputs])

        mixed._backward = backward
        return mixed


class Supernet(Module):
    def __init__(self, cfg: SupernetConfig, num_mfcc: int, num_frames: int, rng: np.random.Generator,
                 dtype=np.float32, menu: Optional[Sequence[CandidateOpSpec]] = None):
        super().__init__()
        self.config = cfg
        self.num_mfcc = num_mfcc
        self.num_frames = num_frames
        self.menu = list(menu) if menu is not None else candidate_menu(cfg.expansion_rates, cfg.kernel_sizes)
        self.channels = apply_channel_multiplier(cfg.base_channels, cfg.omega)
        self.head_channels = apply_channel_multiplier(2 * cfg.base_channels, cfg.omega)

        self.stem = Stem(self.channels, rng, dtype)
        hw = stem_specs(self.channels)[0].output_hw(num_mfcc, num_frames)
        self.layers: List[SearchableLayer] = []
        for i in range(cfg.num_layers):
            stride = FIRST_LAYER_STRIDE if i == 0 else (1, 1)
            layer = SearchableLayer(i, self.menu, self.channels, self.channels, stride, hw, rng, dtype)
            self.layers.append(layer)
            hw = layer.out_hw
        self.head = Head(self.channels, self.head_channels, cfg.num_classes, rng, dtype)
        self.fixed_cost = fixed_stage_cost(num_mfcc, num_frames, self.channels, self.channels,
                                           self.head_channels, cfg.num_classes, hw)

    @property
    def choices(self) -> List[LayerChoice]:
        return [layer.choice for layer in self.layers]

    def forward(self, x: Tensor, mode: str = "sampled") -> Tensor:
        x = self.stem(x)
        for layer in self.layers:
            x = layer(x, mode)
        return self.head(x)

    def sample_gates(self, rng: np.random.Generator, uniform: bool = False) -> List[int]:
        return [int(np.argmax(sample_gate(choice, rng, uniform))) for choice in self.choices]

    def set_gates(self, indices: Sequence[int]) -> None:
        if len(indices) != len(self.layers):
            raise ValueError(f"expected {len(self.layers)} gate indices, got {len(indices)}")
        for choice, index in zip(self.choices, indices):
            choice.set_active(int(index))

    def zero_arch_grad(self) -> None:
        for choice in self.choices:
            choice.zero_grad()

    def argmax_indices(self) -> List[int]:
        """Highest-probability candidate per layer; ties go to the cheapest, then the lowest index"""
        picks = []
        for layer in self.layers:
            probs = layer.choice.probs
            tied = np.flatnonzero(probs >= probs.max() - 1e-12)
            picks.append(int(min(tied, key=lambda i: (layer.candidate_ops[i], i))))
        return picks

    def arch_state(self) -> np.ndarray:
        return np.stack([choice.alphas for choice in self.choices])

    def load_arch_state(self, alphas: np.ndarray) -> None:
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.shape != (len(self.layers), len(self.menu)):
            raise ShapeError(f"alpha table shape {alphas.shape} != {(len(self.layers), len(self.menu))}")
        for choice, row in zip(self.choices, alphas):
            choice.alphas = row.copy()


def derive_architecture(supernet: Supernet, indices: Optional[Sequence[int]] = None) -> ArchitectureDescription:
    """Freeze every searchable layer to one candidate (argmax of p unless indices are given)"""
    indices = supernet.argmax_indices() if indices is None else list(indices)
    layers = tuple(
        LayerDescription(layer.index, layer.menu[i], layer.stride, layer.out_channels)
        for layer, i in zip(supernet.layers, indices)
    )
    return ArchitectureDescription(
        num_mfcc=supernet.num_mfcc,
        num_frames=supernet.num_frames,
        omega=float(supernet.config.omega),
        num_classes=supernet.config.num_classes,
        stem_channels=supernet.channels,
        head_channels=supernet.head_channels,
        layers=layers,
    )
