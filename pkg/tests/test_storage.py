import numpy as np
import pytest

from storage.artifact_store import ArtifactStore
from utils.errors import CheckpointError
from utils.helpers import read_csv


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "run")


class TestCheckpoints:
    def test_round_trip_with_alphas_and_generator(self, store):
        rng = np.random.default_rng(42)
        rng.standard_normal(5)
        state = {"stem.layers.0.weight": np.arange(6, dtype=np.float32).reshape(2, 3),
                 "stem.layers.1.running_var": np.ones(2)}
        alphas = np.linspace(-1, 1, 38).reshape(2, 19)
        path = store.save_checkpoint("checkpoints/search_last.npz", state, alphas=alphas, rng=rng,
                                     architecture="format_version=1\n", extra={"epoch": 3})
        expected_next = rng.standard_normal(4)

        loaded = store.load_checkpoint(path)
        assert set(loaded["state"]) == set(state)
        for key, value in state.items():
            np.testing.assert_array_equal(loaded["state"][key], value)
            assert loaded["state"][key].dtype == value.dtype
        np.testing.assert_array_equal(loaded["alphas"], alphas)
        assert loaded["architecture"] == "format_version=1\n"
        assert loaded["extra"] == {"epoch": 3}
        restored = ArtifactStore.restore_rng(loaded["rng_state"])
        np.testing.assert_array_equal(restored.standard_normal(4), expected_next)

    def test_missing_checkpoint(self, store):
        with pytest.raises(CheckpointError, match="not found"):
            store.load_checkpoint(store.path("checkpoints/none.npz"))

    def test_corrupt_checkpoint(self, store):
        path = store.path("broken.npz")
        path.write_bytes(b"PK\x03\x04 definitely not a zip")
        with pytest.raises(CheckpointError):
            store.load_checkpoint(path)

    def test_overwrite_keeps_one_file(self, store):
        store.save_checkpoint("checkpoints/search_last.npz", {"w": np.zeros(2)})
        store.save_checkpoint("checkpoints/search_last.npz", {"w": np.ones(2)})
        folder = store.path("checkpoints")
        assert [p.name for p in folder.iterdir()] == ["search_last.npz"]
        np.testing.assert_array_equal(store.load_checkpoint(folder / "search_last.npz")["state"]["w"], np.ones(2))


class TestFeatureCache:
    def test_round_trip(self, store):
        features = np.random.default_rng(0).standard_normal((3, 1, 10, 51)).astype(np.float32)
        blob, _ = store.save_features("validation", features, np.array([0, 2, 1]), ["a", "b", "c"],
                                      {"num_mfcc": 10})
        assert blob.stat().st_size == features.size * 4
        restored, labels, sidecar = store.load_features("validation")
        np.testing.assert_array_equal(restored, features)
        np.testing.assert_array_equal(labels, [0, 2, 1])
        assert sidecar["clip_ids"] == ["a", "b", "c"] and sidecar["mfcc"] == {"num_mfcc": 10}


class TestTables:
    def test_csv_uses_point_decimals(self, store):
        path = store.write_table("metrics.csv", ("epoch", "acc"), [(1, 0.5), (2, 0.75)])
        assert path.read_text().splitlines() == ["epoch,acc", "1,0.5", "2,0.75"]
        assert read_csv(path)[1] == {"epoch": "2", "acc": "0.75"}
