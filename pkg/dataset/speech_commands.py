"""Speech Commands v1 ingestion: one folder per word, a background-noise folder,
and the published validation/testing list files deciding the split of each file.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set

import numpy as np

from analysis.audio_frontend import CLIP_SAMPLES, read_wav
from dataset.manifest import (
    CLASS_LABELS,
    KEYWORDS,
    SILENCE,
    SPLITS,
    TEST,
    TRAIN,
    UNKNOWN,
    VALIDATION,
    DatasetManifest,
    ManifestEntry,
)
from utils.errors import DatasetError
from utils.logger import setup_logger

NOISE_FOLDER = "_background_noise_"
VALIDATION_LIST = "validation_list.txt"
TESTING_LIST = "testing_list.txt"

logger = setup_logger("speech_commands")


@dataclass
class RawIndex:
    root: Path
    # word -> sorted relative paths ("word/file.wav")
    words: Dict[str, List[str]] = field(default_factory=dict)
    noise: List[str] = field(default_factory=list)
    noise_lengths: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(files) for files in self.words.values())


def scan_layout(root: Path) -> RawIndex:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")

    index = RawIndex(root)
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f"{folder.name}/{f.name}" for f in folder.glob("*.wav"))
        if folder.name == NOISE_FOLDER:
            index.noise = files
            continue
        if folder.name.startswith("_"):
            continue
        if not files:
            raise DatasetError(f"word folder {folder} holds no .wav files")
        index.words[folder.name] = files

    if not index.words:
        raise DatasetError(f"{root} holds no word folders")
    for rel in index.noise:
        index.noise_lengths[rel] = len(read_wav(root / rel))
    logger.info(f"Scanned {len(index)} clips in {len(index.words)} words, {len(index.noise)} noise files")
    return index


def read_split_list(path: Path) -> Set[str]:
    if not Path(path).is_file():
        raise DatasetError(f"split list {path} not found")
    return {line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()}


def assign_split(rel_path: str, validation: Set[str], testing: Set[str]) -> str:
    if rel_path in testing:
        return TEST
    if rel_path in validation:
        return VALIDATION
    return TRAIN


def build_manifest(raw: RawIndex, validation: Optional[Set[str]] = None, testing: Optional[Set[str]] = None,
                   seed: int = 0) -> DatasetManifest:
    """Keywords as-is; unknown and silence drawn per split to the rounded mean class size"""

    if validation is None:
        validation = read_split_list(raw.root / VALIDATION_LIST)
    if testing is None:
        testing = read_split_list(raw.root / TESTING_LIST)

    rng = np.random.default_rng(seed)
    per_split: Dict[str, Dict[str, List[str]]] = {split: {} for split in SPLITS}
    for word, files in raw.words.items():
        for rel in files:
            per_split[assign_split(rel, validation, testing)].setdefault(word, []).append(rel)

    long_noise = [rel for rel in raw.noise if raw.noise_lengths.get(rel, 0) >= CLIP_SAMPLES]
    entries: List[ManifestEntry] = []
    for split in SPLITS:
        groups = per_split[split]
        quota = int(np.floor(sum(len(f) for f in groups.values()) / max(len(raw.words), 1) + 0.5))

        for word in KEYWORDS:
            entries.extend(ManifestEntry(rel, word, split) for rel in groups.get(word, []))

        others = sorted(rel for word, files in groups.items() if word not in KEYWORDS for rel in files)
        if quota > len(others):
            raise DatasetError(
                f"{split}: unknown quota {quota} exceeds the {len(others)} available non-keyword clips"
            )
        picks = rng.choice(len(others), size=quota, replace=False) if quota else []
        entries.extend(ManifestEntry(others[i], UNKNOWN, split) for i in sorted(picks))

        if quota and not long_noise:
            raise DatasetError("silence class needs at least one noise file of 1 s or longer")
        for i in range(quota):
            rel = long_noise[int(rng.integers(len(long_noise)))]
            offset = int(rng.integers(0, raw.noise_lengths[rel] - CLIP_SAMPLES + 1))
            entries.append(ManifestEntry(f"{rel}#{split}:{i}", SILENCE, split, offset))
        logger.info(f"{split}: {quota} unknown and {quota} silence entries")

    manifest = DatasetManifest(entries, CLASS_LABELS, noise_bank=list(raw.noise), seed=seed, root=raw.root)
    manifest.verify_partition()
    return manifest


def load_speech_commands(root: Path, seed: int = 0) -> DatasetManifest:
    return build_manifest(scan_layout(root), seed=seed)
