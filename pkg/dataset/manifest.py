from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from analysis.audio_frontend import AudioClip
from utils.errors import DatasetError
from utils.helpers import atomic_write_text

KEYWORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
UNKNOWN = "unknown"
SILENCE = "silence"
CLASS_LABELS = KEYWORDS + (UNKNOWN, SILENCE)

TRAIN = "train"
VALIDATION = "validation"
TEST = "test"
SPLITS = (TRAIN, VALIDATION, TEST)


@dataclass(frozen=True)
class ManifestEntry:
    clip_id: str
    label: str
    split: str
    # start sample of the 1 s slice for silence entries cut from the noise bank
    offset: Optional[int] = None

    @property
    def is_silence(self) -> bool:
        return self.label == SILENCE

    def source_id(self) -> str:
        """File (or in-memory clip) the audio comes from"""
        return self.clip_id.split("#", 1)[0] if self.is_silence else self.clip_id


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    class_names: Tuple[str, ...]
    noise_bank: List[str] = field(default_factory=list)
    seed: int = 0
    root: Optional[Path] = None
    # toy datasets keep their audio in memory, keyed by clip id
    clips: Dict[str, AudioClip] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._label_index = {name: i for i, name in enumerate(self.class_names)}

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def label_index(self, label: str) -> int:
        if label not in self._label_index:
            raise DatasetError(f"label {label!r} is not one of {self.class_names}")
        return self._label_index[label]

    def split(self, name: str) -> List[ManifestEntry]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [entry for entry in self.entries if entry.split == name]

    def class_counts(self, split: str) -> Dict[str, int]:
        counts = Counter(entry.label for entry in self.split(split))
        return {name: counts.get(name, 0) for name in self.class_names}

    def verify_partition(self) -> None:
        """No clip id may occur in two splits (or twice in one)"""
        seen: Dict[str, str] = {}
        for entry in self.entries:
            if entry.clip_id in seen:
                raise DatasetError(f"{entry.clip_id} appears in {seen[entry.clip_id]} and {entry.split}")
            seen[entry.clip_id] = entry.split
        for entry in self.entries:
            if entry.split not in SPLITS:
                raise DatasetError(f"{entry.clip_id}: unknown split {entry.split!r}")
            self.label_index(entry.label)

    def to_tsv(self) -> str:
        lines = ["id\tlabel\tsplit\toffset"]
        for entry in self.entries:
            offset = "" if entry.offset is None else str(entry.offset)
            lines.append(f"{entry.clip_id}\t{entry.label}\t{entry.split}\t{offset}")
        return "\n".join(lines) + "\n"

    def save_tsv(self, path: Path) -> Path:
        return atomic_write_text(Path(path), self.to_tsv())


def read_manifest_tsv(path: Path, class_names: Sequence[str] = CLASS_LABELS) -> DatasetManifest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != ["id", "label", "split", "offset"]:
        raise DatasetError(f"{path}: missing manifest header")
    entries = []
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"{path}:{number}: expected 4 tab-separated fields")
        clip_id, label, split, offset = parts
        entries.append(ManifestEntry(clip_id, label, split, int(offset) if offset else None))
    manifest = DatasetManifest(entries, tuple(class_names))
    manifest.verify_partition()
    return manifest
