"""Dense tensors with a reverse-mode gradient tape.

Every value produced by an op in ``engine.functional`` remembers its parents and
a closure that pushes its gradient back to them. ``Tensor.backward`` walks the
recorded graph in reverse topological order.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ShapeError


class Tensor:
    """stores an n-d array, its gradient buffer and how it was produced"""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _children: Tuple["Tensor", ...] = (), _op: str = ""):
        self.data = np.asarray(data) if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev = _children
        self._backward: Callable[[], None] = lambda: None
        self._op = _op

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Create an op output; ``backward`` receives the output gradient"""
        requires = any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=requires, _children=tuple(parents) if requires else (), _op=op)
        if requires:
            def _backward():
                backward(out.grad)
            out._backward = _backward
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        # topological order of the recorded graph, iterative to avoid recursion limits
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        self.grad = np.array(grad, dtype=self.data.dtype).reshape(self.shape)
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


class Parameter:
    """A weight tensor plus the flags deciding how training treats it"""

    __slots__ = ("value", "learnable", "quantize")

    def __init__(self, data: np.ndarray, learnable: bool = True, quantize: bool = False):
        self.value = Tensor(np.asarray(data), requires_grad=learnable)
        self.learnable = learnable
        self.quantize = quantize

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @data.setter
    def data(self, array: np.ndarray) -> None:
        if np.shape(array) != self.value.data.shape:
            raise ShapeError(f"parameter shape {self.value.data.shape} cannot take {np.shape(array)}")
        self.value.data = np.asarray(array, dtype=self.value.data.dtype)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    @property
    def size(self) -> int:
        return int(self.value.data.size)

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter(shape={self.value.shape}, learnable={self.learnable}, quantize={self.quantize})"


class LayerKind(str, Enum):
    CONV2D = "Conv2d"
    DEPTHWISE_CONV2D = "DepthwiseConv2d"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    GLOBAL_AVG_POOL = "GlobalAvgPool"
    FULLY_CONNECTED = "FullyConnected"


def same_padding(kernel: Tuple[int, int]) -> Tuple[int, int, int, int]:
    """(top, bottom, left, right): k-1 total per axis, floor before and ceil after"""
    kh, kw = kernel
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return top, kh - 1 - top, left, kw - 1 - left


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ShapeError(f"stride components must be >= 1, got {self.stride}")
        if self.kernel[0] < 1 or self.kernel[1] < 1:
            raise ShapeError(f"kernel components must be >= 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if self.kind == LayerKind.DEPTHWISE_CONV2D and self.in_channels != self.out_channels:
            raise ShapeError(
                f"depthwise conv needs in_channels == out_channels, got {self.in_channels} and {self.out_channels}"
            )
        if self.padding is None:
            object.__setattr__(self, "padding", same_padding(self.kernel) if self.is_conv else (0, 0, 0, 0))

    @property
    def is_conv(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D)

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        kh, kw = self.kernel
        if self.kind == LayerKind.CONV2D:
            return (self.out_channels, self.in_channels, kh, kw)
        if self.kind == LayerKind.DEPTHWISE_CONV2D:
            return (self.out_channels, 1, kh, kw)
        if self.kind == LayerKind.FULLY_CONNECTED:
            return (self.out_channels, self.in_channels)
        if self.kind == LayerKind.BATCH_NORM:
            return (self.out_channels,)
        return ()

    def output_hw(self, height: int, width: int) -> Tuple[int, int]:
        if not self.is_conv:
            return height, width
        top, bottom, left, right = self.padding
        kh, kw = self.kernel
        sh, sw = self.stride
        out_h = (height + top + bottom - kh) // sh + 1
        out_w = (width + left + right - kw) // sw + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"kernel {self.kernel} does not fit a {height}x{width} input")
        return out_h, out_w
