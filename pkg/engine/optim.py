import math
from typing import Iterable

from engine.tensor import Parameter


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """value <- value - lr * grad for learnable parameters holding a gradient"""
    if learning_rate < 0:
        raise ValueError(f"learning rate must be >= 0, got {learning_rate}")
    for param in params:
        if not param.learnable or param.grad is None:
            continue
        param.value.data -= (learning_rate * param.grad).astype(param.value.data.dtype, copy=False)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * t / T)) / 2, from lr0 at t=0 down to 0 at t=T"""
    if total <= 0:
        return lr0
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))
