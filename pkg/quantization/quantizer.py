"""Uniform mid-rise weight quantizer with a straight-through gradient.

quantize_k maps any real weight onto 2**k levels spread evenly over [-1, 1]:

    w_q = 2 * clamp(round((2**k - 1) * (w + 1) / 2) / (2**k - 1), 0, 1) - 1

The level count is even, so zero is never an output.
"""

from dataclasses import dataclass
from typing import Iterable, Tuple, Union

import numpy as np

from engine.tensor import Parameter, Tensor

ArrayLike = Union[float, np.ndarray]

FULL_PRECISION_BYTES = 4


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int
    tie_break: str = "half_away_from_zero"

    def __post_init__(self):
        if not 1 <= self.bits <= 8:
            raise ValueError(f"quantizer bits must lie in [1, 8], got {self.bits}")
        if self.tie_break != "half_away_from_zero":
            raise ValueError("only round-half-away-from-zero is supported")

    @property
    def steps(self) -> int:
        return 2 ** self.bits - 1

    def levels(self) -> np.ndarray:
        m = np.arange(self.steps + 1, dtype=np.float64)
        return 2.0 * m / self.steps - 1.0


def clamp(x: ArrayLike, a: float, b: float) -> ArrayLike:
    if a > b:
        raise ValueError(f"clamp needs a <= b, got a={a}, b={b}")
    if np.isscalar(x):
        return max(a, min(x, b))
    return np.clip(x, a, b)


def round_half_away_from_zero(x: ArrayLike) -> ArrayLike:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def level_indices(w: ArrayLike, spec: QuantizerSpec) -> np.ndarray:
    """Integer level index m in [0, 2**k - 1] for each weight"""
    inner = spec.steps * (np.asarray(w, dtype=np.float64) + 1.0) / 2.0
    return np.asarray(clamp(round_half_away_from_zero(inner), 0, spec.steps)).astype(np.int64)


def dequantize_indices(m: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    return 2.0 * np.asarray(m, dtype=np.float64) / spec.steps - 1.0


def quantize(w: Union[ArrayLike, Tensor], spec: QuantizerSpec) -> Union[ArrayLike, Tensor]:
    if isinstance(w, Tensor):
        return Tensor(quantize(w.data, spec))
    values = dequantize_indices(level_indices(w, spec), spec)
    if np.isscalar(w):
        return float(values)
    return values.astype(np.asarray(w).dtype if np.issubdtype(np.asarray(w).dtype, np.floating) else np.float64)


def ste_quantize(w: Parameter, spec: QuantizerSpec) -> Tensor:
    """Forward uses quantize(w); backward hands the gradient to w unchanged"""
    if not w.quantize:
        raise ValueError("ste_quantize applies only to parameters flagged quantize=True")
    latent = w.value

    def backward(grad: np.ndarray) -> None:
        latent.accumulate(grad)

    return Tensor.from_op(quantize(latent.data, spec), (latent,), "ste_quantize", backward)


def post_quantize(model, spec: QuantizerSpec):
    """Round every quantize-flagged weight in place; norm and bias parameters stay untouched"""
    for param in model.parameters():
        if param.quantize:
            param.data = quantize(param.data, spec)
    return model


def split_parameter_counts(params: Iterable[Parameter]) -> Tuple[int, int]:
    """(quantized weight count, exempt full-precision count)"""
    quantized = exempt = 0
    for param in params:
        if param.quantize:
            quantized += param.size
        else:
            exempt += param.size
    return quantized, exempt


def weight_memory_bytes(model, spec: QuantizerSpec, include_exempt: bool = False) -> float:
    """Storage for the weights: count * k / 8 per quantized tensor, plus float32 exempt ones on request"""
    quantized, exempt = split_parameter_counts(model.parameters())
    total = quantized * spec.bits / 8
    if include_exempt:
        total += exempt * FULL_PRECISION_BYTES
    return total
