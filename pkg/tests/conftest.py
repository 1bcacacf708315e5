import os
import tempfile

# keep test runs from writing log files into the working tree
os.environ.setdefault("KWS_LOG_DIR", tempfile.mkdtemp(prefix="kws_nas_logs_"))
os.environ.setdefault("KWS_LOG_LEVEL", "WARNING")

from typing import Callable, Sequence

import numpy as np
import pytest

from config.settings import load_settings
from engine.tensor import Tensor


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_settings(tmp_path):
    """Toy dataset and a two-layer supernet small enough for unit tests"""
    return load_settings(overrides={
        "dataset": "toy",
        "toy_classes": 3,
        "toy_samples_per_class": 20,
        "base_channels": 8,
        "num_layers": 2,
        "pretrain_epochs": 1,
        "search_epochs": 1,
        "retrain_epochs": 1,
        "batch_size": 8,
        "beta": 1,
        "ops_target": 1e5,
        "quant_bits": 8,
        "output_dir": tmp_path / "run",
    })


def _numeric_gradient(forward: Callable[[], Tensor], tensor: Tensor, projection: np.ndarray,
                      indices: Sequence[tuple], eps: float) -> np.ndarray:
    numeric = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        original = tensor.data[idx]
        tensor.data[idx] = original + eps
        plus = float(np.sum(forward().data * projection))
        tensor.data[idx] = original - eps
        minus = float(np.sum(forward().data * projection))
        tensor.data[idx] = original
        numeric[n] = (plus - minus) / (2 * eps)
    return numeric


@pytest.fixture
def gradcheck():
    """Compare analytic gradients of <forward(), R> against central differences"""

    def check(forward: Callable[[], Tensor], inputs: Sequence[Tensor], seed: int = 0, eps: float = 1e-6,
              rtol: float = 1e-4, atol: float = 1e-7, max_entries: int = 20) -> None:
        rng = np.random.default_rng(seed)
        out = forward()
        projection = rng.standard_normal(out.shape)
        for tensor in inputs:
            tensor.zero_grad()
        out.backward(projection)

        for tensor in inputs:
            assert tensor.grad is not None, "no gradient reached an input"
            analytic = tensor.grad.copy()
            all_indices = list(np.ndindex(tensor.shape))
            picks = rng.choice(len(all_indices), size=min(max_entries, len(all_indices)), replace=False)
            indices = [all_indices[i] for i in picks]
            numeric = _numeric_gradient(forward, tensor, projection, indices, eps)
            np.testing.assert_allclose([analytic[idx] for idx in indices], numeric, rtol=rtol, atol=atol)

    return check
