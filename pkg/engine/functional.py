"""Layer menu of the keyword-spotting networks, each with an exact backward pass.

Activations are laid out (batch, channels, height, width). Convolutions carry no
bias because batch norm follows each of them.
"""

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.tensor import LayerKind, LayerSpec, Tensor
from utils.errors import ShapeError

BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.9


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op} expects a {rank}-d input, got shape {x.shape}")


def _windows(x: np.ndarray, spec: LayerSpec) -> Tuple[np.ndarray, Tuple[int, int]]:
    top, bottom, left, right = spec.padding
    padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    out_h, out_w = spec.output_hw(x.shape[2], x.shape[3])
    sh, sw = spec.stride
    # (batch, channels, out_h, out_w, kh, kw)
    windows = sliding_window_view(padded, spec.kernel, axis=(2, 3))[:, :, ::sh, ::sw][:, :, :out_h, :out_w]
    return windows, (out_h, out_w)


def _fold(grad_windows: np.ndarray, input_shape: Tuple[int, ...], spec: LayerSpec) -> np.ndarray:
    """Adjoint of _windows: scatter-add window gradients back onto the input grid"""
    batch, channels, height, width = input_shape
    top, bottom, left, right = spec.padding
    kh, kw = spec.kernel
    sh, sw = spec.stride
    out_h, out_w = grad_windows.shape[2], grad_windows.shape[3]
    padded = np.zeros((batch, channels, height + top + bottom, width + left + right), dtype=grad_windows.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += grad_windows[..., i, j]
    return padded[:, :, top:top + height, left:left + width]


def conv2d(x: Tensor, weight: Tensor, spec: LayerSpec) -> Tensor:
    _require_rank(x, 4, "conv2d")
    expected = spec.weight_shape
    if weight.shape != expected:
        raise ShapeError(f"conv2d weight shape {weight.shape} != expected {expected}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d input channels dimension is {x.shape[1]}, layer expects {spec.in_channels}")

    windows, _ = _windows(x.data, spec)
    # (batch, out_h, out_w, out_channels) -> (batch, out_channels, out_h, out_w)
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(grad: np.ndarray) -> None:
        if weight.requires_grad:
            weight.accumulate(np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            # (batch, out_h, out_w, in_channels, kh, kw) -> (batch, in_channels, out_h, out_w, kh, kw)
            grad_windows = np.tensordot(grad, weight.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            x.accumulate(_fold(grad_windows, x.shape, spec))

    return Tensor.from_op(out, (x, weight), "conv2d", backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, spec: LayerSpec) -> Tensor:
    _require_rank(x, 4, "depthwise_conv2d")
    if weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise ShapeError(
            f"depthwise weight channel count {weight.shape[0] if weight.ndim else None} != input channels {x.shape[1]}"
        )
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"depthwise weight shape {weight.shape} != expected {spec.weight_shape}")

    windows, _ = _windows(x.data, spec)
    kernels = weight.data[:, 0]
    out = np.einsum("bchwij,cij->bchw", windows, kernels)

    def backward(grad: np.ndarray) -> None:
        if weight.requires_grad:
            weight.accumulate(np.einsum("bchw,bchwij->cij", grad, windows)[:, None])
        if x.requires_grad:
            grad_windows = np.einsum("bchw,cij->bchwij", grad, kernels)
            x.accumulate(_fold(grad_windows, x.shape, spec))

    return Tensor.from_op(out, (x, weight), "depthwise_conv2d", backward)


class RunningMoments:
    """Batch-norm running mean/variance, updated by exponential moving average"""

    def __init__(self, channels: int, momentum: float = BATCH_NORM_MOMENTUM, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        self.mean = (self.momentum * self.mean + (1 - self.momentum) * batch_mean).astype(self.mean.dtype)
        self.var = (self.momentum * self.var + (1 - self.momentum) * batch_var_unbiased).astype(self.var.dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: Optional[RunningMoments],
              mode: str = "train", eps: float = BATCH_NORM_EPS) -> Tensor:
    """Per-channel normalization; ``state`` is updated in train mode when given"""
    _require_rank(x, 4, "batchnorm")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm gamma/beta length must equal channel count {channels}")
    if mode not in ("train", "infer"):
        raise ValueError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")

    axes = (0, 2, 3)
    shape = (1, channels, 1, 1)
    if mode == "infer":
        if state is None:
            raise ValueError("batchnorm infer mode needs running moments")
        inv_std = 1.0 / np.sqrt(state.var.astype(x.data.dtype) + eps)
        x_hat = (x.data - state.mean.reshape(shape)) * inv_std.reshape(shape)
        out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)

        def backward_infer(grad: np.ndarray) -> None:
            if gamma.requires_grad:
                gamma.accumulate((grad * x_hat).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate(grad.sum(axis=axes))
            if x.requires_grad:
                x.accumulate(grad * (gamma.data * inv_std).reshape(shape))

        return Tensor.from_op(out, (x, gamma, beta), "batchnorm", backward_infer)

    if x.shape[0] < 2:
        raise ShapeError("batchnorm train mode needs batch >= 2 (variance undefined for a single sample)")

    count = x.data.size // channels
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * x_hat + beta.data.reshape(shape)
    if state is not None:
        state.update(mean, var * count / (count - 1))

    def backward(grad: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate((grad * x_hat).sum(axis=axes))
        if beta.requires_grad:
            beta.accumulate(grad.sum(axis=axes))
        if x.requires_grad:
            g_hat = grad * gamma.data.reshape(shape)
            sum_g = g_hat.sum(axis=axes).reshape(shape)
            sum_gx = (g_hat * x_hat).sum(axis=axes).reshape(shape)
            x.accumulate(inv_std.reshape(shape) / count * (count * g_hat - sum_g - x_hat * sum_gx))

    return Tensor.from_op(out, (x, gamma, beta), "batchnorm", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def backward(grad: np.ndarray) -> None:
        x.accumulate(grad * mask)

    return Tensor.from_op(out, (x,), "relu", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank(x, 4, "global_avg_pool")
    height, width = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def backward(grad: np.ndarray) -> None:
        x.accumulate(np.broadcast_to(grad[:, :, None, None] / (height * width), x.shape))

    return Tensor.from_op(out, (x,), "global_avg_pool", backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    _require_rank(x, 2, "fully_connected")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"fully_connected weight shape {weight.shape} does not take {x.shape[1]} input features")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(grad: np.ndarray) -> None:
        if weight.requires_grad:
            weight.accumulate(grad.T @ x.data)
        if bias.requires_grad:
            bias.accumulate(grad.sum(axis=0))
        if x.requires_grad:
            x.accumulate(grad @ weight.data)

    return Tensor.from_op(out, (x, weight, bias), "fully_connected", backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands disagree: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(grad: np.ndarray) -> None:
        a.accumulate(grad)
        b.accumulate(grad)

    return Tensor.from_op(out, (a, b), "add", backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood; log-sum-exp stabilized"""
    _require_rank(logits, 2, "softmax_cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes - 1}]")

    log_probs = log_softmax(logits.data)
    loss = -log_probs[np.arange(batch), labels].mean()

    def backward(grad: np.ndarray) -> None:
        probs = np.exp(log_probs)
        probs[np.arange(batch), labels] -= 1.0
        logits.accumulate(grad * probs / batch)

    return Tensor.from_op(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy", backward)


def zeros(shape: Tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def apply_layer(x: Tensor, spec: LayerSpec, weight: Tensor) -> Tensor:
    """Dispatch the convolution kinds of the layer menu"""
    if spec.kind == LayerKind.CONV2D:
        return conv2d(x, weight, spec)
    if spec.kind == LayerKind.DEPTHWISE_CONV2D:
        return depthwise_conv2d(x, weight, spec)
    raise ValueError(f"apply_layer does not handle {spec.kind}")
