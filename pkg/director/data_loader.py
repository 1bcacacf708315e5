from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from dataset.loader import SampleLoader
from dataset.manifest import TRAIN, VALIDATION
from utils.errors import DatasetError

# training runs in single precision; features are computed in double
FEATURE_DTYPE = np.float32

# purpose -> the only split it may consume
ALLOWED_SPLITS = {
    "weights": TRAIN,
    "arch": VALIDATION,
}


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    split: str

    def __len__(self) -> int:
        return int(self.labels.size)


@dataclass
class SplitLedger:
    """Counts which split fed which kind of update over a run"""

    counts: Counter = field(default_factory=Counter)

    def record(self, purpose: str, batch: Batch) -> None:
        allowed = ALLOWED_SPLITS.get(purpose)
        if allowed is not None and batch.split != allowed:
            raise DatasetError(f"{purpose} updates must consume {allowed} batches, got a {batch.split} batch")
        self.counts[(purpose, batch.split)] += len(batch)

    def samples(self, purpose: str, split: str) -> int:
        return self.counts[(purpose, split)]


class BatchLoader:
    """Shuffled mini-batches of one split.

    Train batches are featurized on the fly so every epoch sees fresh augmentation;
    other splits are featurized once and reused.
    """

    def __init__(self, samples: SampleLoader, split: str, batch_size: int, augment: Optional[bool] = None):
        if batch_size < 1:
            raise ValueError(f"batch size must be positive, got {batch_size}")
        self.samples = samples
        self.split = split
        self.batch_size = batch_size
        self.augment = split == TRAIN if augment is None else augment
        self.entries = samples.manifest.split(split)
        if not self.entries:
            raise DatasetError(f"split {split!r} is empty")
        self._cached: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.entries)

    def num_batches(self, drop_small: bool = True) -> int:
        full, rest = divmod(len(self.entries), self.batch_size)
        return full + (1 if rest >= (2 if drop_small else 1) else 0)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._cached is None:
            features, labels, _ = self.samples.load_split(self.split)
            self._cached = (features.astype(FEATURE_DTYPE), labels)
        return self._cached

    def batches(self, rng: Optional[np.random.Generator] = None, shuffle: bool = True,
                drop_small: bool = True) -> Iterator[Batch]:
        """drop_small skips a trailing single-sample batch (train-mode batch norm needs two)"""
        order = np.arange(len(self.entries))
        if shuffle:
            if rng is None:
                raise ValueError("shuffled batches need a caller-owned generator")
            order = rng.permutation(order)

        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            if drop_small and idx.size < 2:
                continue
            yield self._batch(idx, rng)

    def _batch(self, idx: np.ndarray, rng: Optional[np.random.Generator]) -> Batch:
        if self.augment:
            features, labels = [], []
            for i in idx:
                matrix, label = self.samples.load_sample(self.entries[int(i)], rng, training=True)
                features.append(matrix.values.data)
                labels.append(label)
            stacked = np.concatenate(features, axis=0).astype(FEATURE_DTYPE)
            return Batch(stacked, np.asarray(labels, dtype=np.int64), self.split)
        features, labels = self.arrays()
        return Batch(features[idx], labels[idx], self.split)

    def cycle(self, rng: np.random.Generator) -> Iterator[Batch]:
        """Endless reshuffled passes, for pairing arch steps with weight steps"""
        while True:
            yielded = False
            for batch in self.batches(rng):
                yielded = True
                yield batch
            if not yielded:
                raise DatasetError(f"split {self.split!r} cannot fill a batch of two")
