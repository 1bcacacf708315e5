"""Stateful layer modules built on engine.functional.

A module owns its Parameters and running moments. Quantize-flagged weights are
read through the quantizer set with ``Module.set_quantizer``.
"""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from engine import functional as F
from engine.tensor import LayerKind, LayerSpec, Parameter, Tensor
from quantization.quantizer import QuantizerSpec, ste_quantize
from utils.errors import CheckpointError


class Module:
    def __init__(self):
        self.training = True
        self.quantizer: Optional[QuantizerSpec] = None

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _members(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, member in self._members():
            if isinstance(member, Module):
                yield from member.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, module in self.named_modules():
            yield module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, member in self._members():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(member, Parameter):
                yield full, member
            else:
                yield from member.named_parameters(full)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, module in self.named_modules(prefix):
            if isinstance(module, BatchNorm2d):
                yield f"{name}.running_mean", module.moments.mean
                yield f"{name}.running_var", module.moments.var

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def set_quantizer(self, spec: Optional[QuantizerSpec]) -> "Module":
        for module in self.modules():
            module.quantizer = spec
        return self

    def set_running_stats_frozen(self, frozen: bool) -> "Module":
        for module in self.modules():
            if isinstance(module, BatchNorm2d):
                module.stats_frozen = frozen
        return self

    def weight_view(self, param: Parameter) -> Tensor:
        if param.quantize and self.quantizer is not None:
            return ste_quantize(param, self.quantizer)
        return param.value

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        norms = {name: module for name, module in self.named_modules() if isinstance(module, BatchNorm2d)}
        expected = set(params) | {f"{n}.{b}" for n in norms for b in ("running_mean", "running_var")}
        missing = expected - set(state)
        if missing:
            raise CheckpointError(f"state is missing {len(missing)} entries, e.g. {sorted(missing)[0]}")
        for name, param in params.items():
            try:
                param.data = state[name]
            except ValueError as e:
                raise CheckpointError(f"{name}: {e}") from e
        for name, module in norms.items():
            module.moments.mean = np.asarray(state[f"{name}.running_mean"], dtype=module.moments.mean.dtype).copy()
            module.moments.var = np.asarray(state[f"{name}.running_var"], dtype=module.moments.var.dtype).copy()


def he_normal(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if spec.kind not in (LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D):
            raise ValueError(f"Conv2d cannot host a {spec.kind} layer")
        self.spec = spec
        kh, kw = spec.kernel
        fan_in = kh * kw * (1 if spec.kind == LayerKind.DEPTHWISE_CONV2D else spec.in_channels)
        self.weight = Parameter(he_normal(spec.weight_shape, fan_in, rng, dtype), quantize=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.apply_layer(x, self.spec, self.weight_view(self.weight))


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.spec = LayerSpec(LayerKind.BATCH_NORM, channels, channels)
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.moments = F.RunningMoments(channels, dtype=dtype)
        self.stats_frozen = False

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "infer"
        state = None if (self.training and self.stats_frozen) else self.moments
        return F.batchnorm(x, self.gamma.value, self.beta.value, state, mode)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return F.relu(x)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return F.global_avg_pool(x)


class FullyConnected(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = LayerSpec(LayerKind.FULLY_CONNECTED, in_features, out_features)
        self.weight = Parameter(he_normal((out_features, in_features), in_features, rng, dtype), quantize=True)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.fully_connected(x, self.weight_view(self.weight), self.bias.value)
