"""Pretraining, the alternating weight/architecture search and final retraining."""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from assembly.model_assembler import Evaluation, KwsNetwork, evaluate
from config.settings import Settings
from cost.cost_model import (
    arch_loss_alpha_grads,
    expected_ops,
    regularizer,
    softmax_backward,
    tradeoff_loss,
)
from director.data_loader import Batch, BatchLoader, SplitLedger
from engine import functional as F
from engine.optim import cosine_lr, sgd_step
from engine.tensor import Tensor
from quantization.quantizer import QuantizerSpec
from storage.artifact_store import ArtifactStore
from supernet.architecture import ArchitectureDescription
from supernet.supernet import Supernet, derive_architecture
from utils.errors import DivergenceError
from utils.logger import setup_logger

SEARCH_LOG_HEADER = ("epoch", "ce_train", "ce_val", "expected_ops", "arch_loss", "lr", "per_layer_argmax")
METRICS_HEADER = ("epoch", "loss_train", "acc_train", "acc_val")
SEARCH_CHECKPOINT = "checkpoints/search_last.npz"


class ArchStep(NamedTuple):
    loss: float
    ce: float


@dataclass
class SearchLogRow:
    epoch: int
    ce_train: float
    ce_val: float
    expected_ops: float
    arch_loss: float
    lr: float
    per_layer_argmax: List[str]

    def as_row(self) -> list:
        return [self.epoch, self.ce_train, self.ce_val, self.expected_ops, self.arch_loss, self.lr,
                ";".join(self.per_layer_argmax)]


@dataclass
class MetricsRow:
    epoch: int
    loss_train: float
    acc_train: float
    acc_val: float

    def as_row(self) -> list:
        return [self.epoch, self.loss_train, self.acc_train, self.acc_val]


@dataclass
class SearchResult:
    architecture: ArchitectureDescription
    supernet: Supernet
    log: List[SearchLogRow] = field(default_factory=list)
    pretrain_losses: List[float] = field(default_factory=list)
    last_checkpoint: Optional[Path] = None


@dataclass
class RetrainResult:
    network: KwsNetwork
    bits: Optional[int]
    metrics: List[MetricsRow] = field(default_factory=list)
    validation: Optional[Evaluation] = None
    test: Optional[Evaluation] = None

    @property
    def test_accuracy(self) -> float:
        return self.test.accuracy if self.test is not None else float("nan")


def _mean(values: List[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


class SearchDirector:
    """Runs the architecture search and the retraining of derived networks"""

    def __init__(self, settings: Settings, store: Optional[ArtifactStore] = None):
        self.settings = settings
        self.store = store
        self.logger = setup_logger("search_director")
        self.ledger = SplitLedger()
        bits = settings.run.quant_bits
        self.quantizer = QuantizerSpec(bits) if bits is not None else None

    def build_supernet(self, rng: np.random.Generator, num_frames: int) -> Supernet:
        supernet = Supernet(self.settings.supernet, self.settings.mfcc.num_mfcc, num_frames, rng)
        supernet.set_quantizer(self.quantizer)
        self.logger.info(
            f"Supernet: {len(supernet.layers)} searchable layers x {len(supernet.menu)} candidates, "
            f"{supernet.channels} channels, fixed stages {supernet.fixed_cost.ops} ops"
        )
        return supernet

    def _lr(self, epoch: int, total: int, lr0: float) -> float:
        if self.settings.schedule.lr_schedule == "constant":
            return lr0
        return cosine_lr(epoch, total, lr0)

    def pretrain(self, supernet: Supernet, train: BatchLoader, rng: np.random.Generator) -> List[float]:
        """Train weights along uniformly sampled paths; alphas stay at their initialization"""

        schedule = self.settings.schedule
        self.logger.info(f"Pretraining for {schedule.pretrain_epochs} epochs")
        losses = []
        for epoch in range(schedule.pretrain_epochs):
            lr = self._lr(epoch, schedule.pretrain_epochs, schedule.pretrain_lr)
            epoch_losses = [self.weight_step(supernet, batch, rng, lr, uniform=True) for batch in train.batches(rng)]
            losses.append(_mean(epoch_losses))
            if not math.isfinite(losses[-1]):
                raise DivergenceError(f"non-finite loss in pretrain epoch {epoch + 1}")
            self.logger.info(f"Pretrain epoch {epoch + 1}/{schedule.pretrain_epochs}: loss {losses[-1]:.4f}")
        return losses

    def weight_step(self, supernet: Supernet, batch: Batch, rng: np.random.Generator, lr: float,
                    uniform: bool = False) -> float:
        """Sample gates from p (or uniformly), then one SGD step on the sampled path's weights"""

        self.ledger.record("weights", batch)
        supernet.sample_gates(rng, uniform=uniform)
        supernet.train()
        supernet.zero_grad()
        logits = supernet(Tensor(batch.features), "sampled")
        loss = F.softmax_cross_entropy(logits, batch.labels)
        loss.backward()
        sgd_step(supernet.parameters(), lr)
        supernet.zero_grad()
        return loss.item()

    def arch_step(self, supernet: Supernet, batch: Batch, rng: np.random.Generator,
                  constant_ce: Optional[float] = None) -> ArchStep:
        """One alpha update on a validation batch; weights and running moments stay put.

        dL/dp_j is estimated by dL/dg_j = <dL/dm, o_j(x)>, mapped through the softmax
        Jacobian, plus the analytic gradient of the ops regularizer. With constant_ce the
        data term is dropped and only the regularizer pushes the alphas.
        """

        self.ledger.record("arch", batch)
        tradeoff = self.settings.tradeoff
        supernet.zero_arch_grad()

        if constant_ce is None:
            supernet.sample_gates(rng)
            supernet.train()
            supernet.set_running_stats_frozen(True)
            supernet.zero_grad()
            try:
                logits = supernet(Tensor(batch.features), "all")
                ce_tensor = F.softmax_cross_entropy(logits, batch.labels)
                ce_tensor.backward()
            finally:
                supernet.set_running_stats_frozen(False)
                for layer in supernet.layers:
                    layer.last_outputs = []
            ce = ce_tensor.item()
            supernet.zero_grad()
        else:
            ce = float(constant_ce)

        ops_exp = expected_ops(supernet)
        scale = regularizer(ops_exp, tradeoff)
        cost_grads = arch_loss_alpha_grads(ce, supernet, tradeoff)
        alpha_grads = []
        for layer, cost_grad in zip(supernet.layers, cost_grads):
            data_grad = softmax_backward(layer.choice.probs, scale * layer.choice.grad)
            alpha_grads.append(data_grad + cost_grad)
        for layer, grad in zip(supernet.layers, alpha_grads):
            layer.choice.alphas = layer.choice.alphas - self.settings.schedule.arch_lr * grad
        supernet.zero_arch_grad()
        return ArchStep(tradeoff_loss(ce, ops_exp, tradeoff), ce)

    def run_search(self, train: BatchLoader, validation: BatchLoader, rng: np.random.Generator,
                   supernet: Optional[Supernet] = None, num_frames: Optional[int] = None) -> SearchResult:
        """pretrain, then alternate one weight step (train) with one arch step (validation)"""

        if supernet is None:
            supernet = self.build_supernet(rng, num_frames)
        schedule = self.settings.schedule
        result = SearchResult(architecture=None, supernet=supernet)

        try:
            result.pretrain_losses = self.pretrain(supernet, train, rng)
            self.logger.info(f"Searching for {schedule.search_epochs} epochs (beta={self.settings.tradeoff.beta})")
            val_stream = validation.cycle(rng)
            for epoch in range(schedule.search_epochs):
                lr = self._lr(epoch, schedule.search_epochs, schedule.search_lr)
                ce_train, ce_val, arch_losses = [], [], []
                for batch in train.batches(rng):
                    ce_train.append(self.weight_step(supernet, batch, rng, lr))
                    step = self.arch_step(supernet, next(val_stream), rng)
                    ce_val.append(step.ce)
                    arch_losses.append(step.loss)

                row = SearchLogRow(
                    epoch=epoch + 1,
                    ce_train=_mean(ce_train),
                    ce_val=_mean(ce_val),
                    expected_ops=expected_ops(supernet),
                    arch_loss=_mean(arch_losses),
                    lr=lr,
                    per_layer_argmax=[supernet.menu[i].label for i in supernet.argmax_indices()],
                )
                finite = all(math.isfinite(v) for v in (row.ce_train, row.ce_val, row.arch_loss))
                if not finite or not np.all(np.isfinite(supernet.arch_state())):
                    raise DivergenceError(f"non-finite loss in search epoch {epoch + 1}", result.last_checkpoint)
                result.log.append(row)
                self.logger.info(
                    f"Search epoch {row.epoch}/{schedule.search_epochs}: ce_train {row.ce_train:.4f} "
                    f"ce_val {row.ce_val:.4f} expected_ops {row.expected_ops:.0f} arch_loss {row.arch_loss:.4f}"
                )
                if self.store is not None:
                    result.last_checkpoint = self.store.save_checkpoint(
                        SEARCH_CHECKPOINT, supernet.state_dict(), alphas=supernet.arch_state(), rng=rng,
                        extra={"epoch": row.epoch, "phase": "search"},
                    )
        except DivergenceError as e:
            self.logger.error(f"Search diverged: {e}")
            raise

        result.architecture = derive_architecture(supernet)
        self.logger.info(f"Derived architecture: {' '.join(result.architecture.labels())}")
        return result

    def retrain(self, arch: ArchitectureDescription, train: BatchLoader, validation: BatchLoader,
                test: Optional[BatchLoader], rng: np.random.Generator, bits: Optional[int] = None,
                epochs: Optional[int] = None) -> RetrainResult:
        """Fresh weights, trained with STE quantization at `bits` (None keeps full precision)"""

        schedule = self.settings.schedule
        epochs = schedule.retrain_epochs if epochs is None else epochs
        network = KwsNetwork.from_architecture(arch, rng)
        network.set_quantizer(QuantizerSpec(bits) if bits is not None else None)
        result = RetrainResult(network=network, bits=bits)
        self.logger.info(f"Retraining {arch.active_layer_count()} active layers for {epochs} epochs, bits={bits}")

        for epoch in range(epochs):
            lr = self._lr(epoch, epochs, schedule.search_lr)
            losses, correct, seen = [], 0, 0
            network.train()
            for batch in train.batches(rng):
                self.ledger.record("weights", batch)
                network.zero_grad()
                logits = network(Tensor(batch.features))
                loss = F.softmax_cross_entropy(logits, batch.labels)
                loss.backward()
                sgd_step(network.parameters(), lr)
                losses.append(loss.item())
                correct += int(np.sum(logits.data.argmax(axis=1) == batch.labels))
                seen += len(batch)
            network.zero_grad()

            val = evaluate(network, validation.batches(shuffle=False, drop_small=False), arch.num_classes)
            row = MetricsRow(epoch + 1, _mean(losses), correct / max(seen, 1), val.accuracy)
            if not math.isfinite(row.loss_train):
                raise DivergenceError(f"non-finite loss in retrain epoch {epoch + 1}")
            result.metrics.append(row)
            self.logger.info(
                f"Retrain epoch {row.epoch}/{epochs}: loss {row.loss_train:.4f} "
                f"acc_train {row.acc_train:.4f} acc_val {row.acc_val:.4f}"
            )

        result.validation = evaluate(network, validation.batches(shuffle=False, drop_small=False), arch.num_classes)
        if test is not None:
            result.test = evaluate(network, test.batches(shuffle=False, drop_small=False), arch.num_classes)
            self.logger.info(f"Test accuracy {result.test.accuracy:.4f} ({result.test.num_samples} samples)")
        return result
