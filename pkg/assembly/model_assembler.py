"""Plain feed-forward networks built from derived architectures, and their evaluation."""

import copy
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from director.data_loader import Batch
from engine import functional as F
from engine.modules import Module
from engine.tensor import Tensor
from supernet.architecture import ArchitectureDescription
from supernet.blocks import ChosenLayer, Head, Stem, build_candidate
from supernet.supernet import Supernet, derive_architecture
from utils.logger import setup_logger

logger = setup_logger("evaluation")


class KwsNetwork(Module):
    """stem -> chosen layers -> head, with no gates left"""

    def __init__(self, architecture: ArchitectureDescription, stem: Stem, layers: List[ChosenLayer], head: Head):
        super().__init__()
        self.architecture = architecture
        self.stem = stem
        self.layers = layers
        self.head = head

    @classmethod
    def from_architecture(cls, arch: ArchitectureDescription, rng: np.random.Generator,
                          dtype=np.float32) -> "KwsNetwork":
        stem = Stem(arch.stem_channels, rng, dtype)
        layers = []
        channels = arch.stem_channels
        for layer, skip in zip(arch.layers, arch.skip_flags()):
            if not (layer.op.is_zero and skip):
                op_module = build_candidate(layer.op, channels, layer.channels, layer.stride, rng, dtype)
                layers.append(ChosenLayer(layer.index, op_module, skip))
            channels = layer.channels
        head = Head(channels, arch.head_channels, arch.num_classes, rng, dtype)
        return cls(arch, stem, layers, head)

    @classmethod
    def from_supernet(cls, supernet: Supernet, indices: Optional[Sequence[int]] = None) -> "KwsNetwork":
        """Copy the chosen candidates out of a supernet, trained weights and running moments included"""
        supernet.zero_grad()
        indices = supernet.argmax_indices() if indices is None else list(indices)
        arch = derive_architecture(supernet, indices)
        layers = []
        for layer, index in zip(supernet.layers, indices):
            if layer.menu[index].is_zero and layer.skip:
                continue
            layers.append(ChosenLayer(layer.index, copy.deepcopy(layer.candidates[index]), layer.skip))
        network = cls(arch, copy.deepcopy(supernet.stem), layers, copy.deepcopy(supernet.head))
        network.set_quantizer(supernet.quantizer)
        return network.train(supernet.training)

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for layer in self.layers:
            x = layer(x)
        return self.head(x)


@dataclass
class Evaluation:
    accuracy: float
    loss: float
    confusion: np.ndarray
    num_samples: int

    def per_class_counts(self) -> np.ndarray:
        return self.confusion.sum(axis=1)


def predict(model: Module, features: np.ndarray) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        return model(Tensor(features)).data
    finally:
        model.train(was_training)


def evaluate(model: Module, batches: Iterable[Batch], num_classes: int) -> Evaluation:
    """Accuracy, mean cross entropy and a (true x predicted) confusion matrix in inference mode"""

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    loss_sum = 0.0
    total = 0
    for batch in batches:
        logits = predict(model, batch.features)
        loss_sum += float(F.softmax_cross_entropy(Tensor(logits), batch.labels).item()) * len(batch)
        np.add.at(confusion, (batch.labels, logits.argmax(axis=1)), 1)
        total += len(batch)
    if total == 0:
        raise ValueError("evaluation received no samples")

    accuracy = float(np.trace(confusion)) / total
    logger.debug(f"Evaluated {total} samples: accuracy {accuracy:.4f}")
    return Evaluation(accuracy, loss_sum / total, confusion, total)
