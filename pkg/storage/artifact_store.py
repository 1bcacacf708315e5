import io
import json
import zipfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from utils.errors import CheckpointError
from utils.helpers import atomic_write_bytes, load_json, retry_with_backoff, save_json, write_csv
from utils.logger import setup_logger

CHECKPOINT_VERSION = 1
FEATURE_CACHE_VERSION = 1

# reserved keys inside the checkpoint container
_META_KEY = "__meta__"
_ALPHA_KEY = "__alphas__"


class ArtifactStore:
    """Handles the on-disk layout of a run: checkpoints, feature caches, CSVs and summaries"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.logger = setup_logger("artifact_store")
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def organize_run_folders(self) -> Dict[str, Path]:
        """Create the folder structure of a run"""

        folders = {
            "root": self.output_dir,
            "checkpoints": self.output_dir / "checkpoints",
            "features": self.output_dir / "features",
        }
        for folder in folders.values():
            folder.mkdir(parents=True, exist_ok=True)
        return folders

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def save_checkpoint(self, name: str, state: Dict[str, np.ndarray], alphas: Optional[np.ndarray] = None,
                        rng: Optional[np.random.Generator] = None, architecture: Optional[str] = None,
                        extra: Optional[Dict[str, Any]] = None) -> Path:
        """Versioned container of named tensors, written atomically"""

        target = self.path(name)
        meta = {
            "version": CHECKPOINT_VERSION,
            "architecture": architecture,
            "rng_state": rng.bit_generator.state if rng is not None else None,
            "extra": extra or {},
        }
        arrays = {f"param/{key}": value for key, value in state.items()}
        if alphas is not None:
            arrays[_ALPHA_KEY] = np.asarray(alphas, dtype=np.float64)
        arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))

        buffer = io.BytesIO()
        np.savez(buffer, **arrays)
        try:
            atomic_write_bytes(target, buffer.getvalue())
        except OSError as e:
            self.logger.error(f"Error writing checkpoint {target}: {e}")
            raise
        self.logger.debug(f"Checkpoint written: {target}")
        return target

    def load_checkpoint(self, path: Path) -> Dict[str, Any]:
        """{'state', 'alphas', 'architecture', 'rng_state', 'extra'}"""

        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint {path} not found")
        try:
            with np.load(path, allow_pickle=False) as archive:
                contents = {key: archive[key] for key in archive.files}
        except (OSError, ValueError, EOFError, zipfile.BadZipFile) as e:
            raise CheckpointError(f"checkpoint {path} is corrupt: {e}") from e
        if _META_KEY not in contents:
            raise CheckpointError(f"checkpoint {path} has no metadata entry")

        meta = json.loads(str(contents.pop(_META_KEY)))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint {path} has unsupported version {meta.get('version')}")
        return {
            "state": {key[len("param/"):]: value for key, value in contents.items() if key.startswith("param/")},
            "alphas": contents.get(_ALPHA_KEY),
            "architecture": meta.get("architecture"),
            "rng_state": meta.get("rng_state"),
            "extra": meta.get("extra", {}),
        }

    @staticmethod
    def restore_rng(rng_state: Dict[str, Any]) -> np.random.Generator:
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        return rng

    @retry_with_backoff(max_retries=3)
    def save_features(self, split: str, features: np.ndarray, labels: np.ndarray, clip_ids: Sequence[str],
                      mfcc_config: Dict[str, Any]) -> Tuple[Path, Path]:
        """float32 little-endian blob plus a JSON sidecar naming shape, clips and feature settings"""

        folder = self.organize_run_folders()["features"]
        blob_path = folder / f"{split}.f32"
        sidecar_path = folder / f"{split}.json"
        atomic_write_bytes(blob_path, np.ascontiguousarray(features, dtype="<f4").tobytes())
        save_json({
            "version": FEATURE_CACHE_VERSION,
            "split": split,
            "shape": list(features.shape),
            "labels": [int(v) for v in labels],
            "clip_ids": list(clip_ids),
            "mfcc": mfcc_config,
        }, sidecar_path)
        self.logger.info(f"Cached {features.shape[0]} {split} feature matrices in {blob_path}")
        return blob_path, sidecar_path

    def load_features(self, split: str) -> Tuple[np.ndarray, np.ndarray, Dict[str, Any]]:
        folder = self.output_dir / "features"
        sidecar = load_json(folder / f"{split}.json")
        if sidecar.get("version") != FEATURE_CACHE_VERSION:
            raise CheckpointError(f"feature cache for {split} has unsupported version {sidecar.get('version')}")
        raw = np.frombuffer((folder / f"{split}.f32").read_bytes(), dtype="<f4")
        features = raw.reshape(sidecar["shape"]).astype(np.float32)
        return features, np.asarray(sidecar["labels"], dtype=np.int64), sidecar

    def write_table(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = write_csv(self.path(name), header, rows)
        self.logger.info(f"Wrote {path}")
        return path

    def write_summary(self, name: str, data: Dict[str, Any]) -> Path:
        path = self.path(name)
        save_json(data, path)
        return path
