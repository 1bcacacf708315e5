"""Desk-scale stand-in for Speech Commands: one pure tone per class in Gaussian noise."""

import numpy as np

from analysis.audio_frontend import CLIP_SAMPLES, SAMPLE_RATE, AudioClip
from dataset.manifest import CLASS_LABELS, TEST, TRAIN, VALIDATION, DatasetManifest, ManifestEntry
from utils.errors import DatasetError

TOY_AMPLITUDE = 0.5
TOY_SNR_DB = 10.0
TOY_BASE_FREQUENCY = 300.0
TOY_NOISE_CLIPS = 4
TOY_NOISE_SECONDS = 2
SPLIT_FRACTIONS = (0.70, 0.15)


def toy_clip(class_index: int, sample_index: int, seed: int) -> AudioClip:
    """Sine at 300*(c+1) Hz with white noise at 10 dB SNR, 1 s at 16 kHz"""
    rng = np.random.default_rng([seed, class_index, sample_index])
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE
    phase = rng.uniform(0.0, 2 * np.pi)
    signal = TOY_AMPLITUDE * np.sin(2 * np.pi * TOY_BASE_FREQUENCY * (class_index + 1) * t + phase)
    noise_power = np.mean(signal ** 2) / 10 ** (TOY_SNR_DB / 10)
    noisy = signal + rng.normal(0.0, np.sqrt(noise_power), CLIP_SAMPLES)
    return AudioClip(np.clip(noisy, -1.0, 1.0))


def synthesize_toy(num_classes: int = 4, samples_per_class: int = 200, seed: int = 0) -> DatasetManifest:
    if not 1 <= num_classes <= len(CLASS_LABELS):
        raise DatasetError(f"toy dataset supports 1..{len(CLASS_LABELS)} classes, got {num_classes}")
    if samples_per_class < 1:
        raise DatasetError("samples_per_class must be positive")

    class_names = CLASS_LABELS[:num_classes]
    entries = []
    clips = {}
    for c, label in enumerate(class_names):
        order = np.random.default_rng([seed, c]).permutation(samples_per_class)
        n_train = int(round(SPLIT_FRACTIONS[0] * samples_per_class))
        n_val = int(round(SPLIT_FRACTIONS[1] * samples_per_class))
        for rank, i in enumerate(order):
            split = TRAIN if rank < n_train else VALIDATION if rank < n_train + n_val else TEST
            clip_id = f"toy/{label}/{i:05d}"
            clips[clip_id] = toy_clip(c, int(i), seed)
            entries.append(ManifestEntry(clip_id, label, split))
    entries.sort(key=lambda e: e.clip_id)

    noise_rng = np.random.default_rng([seed, 10_000])
    noise_bank = []
    for i in range(TOY_NOISE_CLIPS):
        noise_id = f"toy_noise/{i}"
        clips[noise_id] = AudioClip(np.clip(noise_rng.normal(0.0, 0.3, TOY_NOISE_SECONDS * SAMPLE_RATE), -1.0, 1.0))
        noise_bank.append(noise_id)

    manifest = DatasetManifest(entries, tuple(class_names), noise_bank=noise_bank, seed=seed, clips=clips)
    manifest.verify_partition()
    return manifest
