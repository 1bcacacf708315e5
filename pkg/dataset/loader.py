from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from analysis.audio_frontend import CLIP_SAMPLES, AudioClip, AudioFrontend, FeatureMatrix, noise_slice, read_wav
from dataset.manifest import TRAIN, DatasetManifest, ManifestEntry
from utils.errors import AudioFormatError, DatasetError


class SampleLoader:
    """Resolves manifest entries to audio and turns them into (features, label)"""

    def __init__(self, manifest: DatasetManifest, frontend: AudioFrontend):
        self.manifest = manifest
        self.frontend = frontend
        self._audio_cache: Dict[str, AudioClip] = {}

    def resolve_audio(self, source_id: str) -> AudioClip:
        if source_id in self.manifest.clips:
            return self.manifest.clips[source_id]
        if source_id in self._audio_cache:
            return self._audio_cache[source_id]
        if self.manifest.root is None:
            raise DatasetError(f"{source_id} is neither an in-memory clip nor under a dataset root")
        path = Path(self.manifest.root) / source_id
        try:
            clip = read_wav(path)
        except AudioFormatError:
            raise
        except Exception as e:
            raise AudioFormatError(f"unreadable audio file {path}: {e}") from e
        # noise files are reused by every silence entry and every augmentation draw
        if source_id in self.manifest.noise_bank:
            self._audio_cache[source_id] = clip
        return clip

    def noise_bank(self) -> List[AudioClip]:
        return [self.resolve_audio(source_id) for source_id in self.manifest.noise_bank]

    def clip_for(self, entry: ManifestEntry) -> AudioClip:
        source = self.resolve_audio(entry.source_id())
        if entry.is_silence:
            return AudioClip(noise_slice(source, entry.offset or 0, CLIP_SAMPLES).copy(), source.sample_rate)
        return source

    def load_sample(self, entry: ManifestEntry, rng: Optional[np.random.Generator] = None,
                    training: bool = False) -> Tuple[FeatureMatrix, int]:
        """Only train-split entries are ever augmented"""
        augment = training and entry.split == TRAIN
        features = self.frontend.featurize(
            self.clip_for(entry),
            rng=rng,
            noise_bank=self.noise_bank() if augment else (),
            training=augment,
        )
        return features, self.manifest.label_index(entry.label)

    def load_split(self, split: str) -> Tuple[np.ndarray, np.ndarray, List[str]]:
        """Un-augmented features of a whole split, stacked as (N, 1, n_mfcc, frames)"""
        entries = self.manifest.split(split)
        if not entries:
            raise DatasetError(f"split {split!r} is empty")
        features = np.concatenate([self.load_sample(e)[0].values.data for e in entries], axis=0)
        labels = np.array([self.manifest.label_index(e.label) for e in entries], dtype=np.int64)
        return features, labels, [e.clip_id for e in entries]
