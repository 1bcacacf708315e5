from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import librosa
import numpy as np
import scipy.fft
import scipy.signal
from scipy.io import wavfile

from config.settings import AugmentConfig, MfccConfig
from engine.tensor import Tensor
from utils.errors import AudioFormatError
from utils.logger import setup_logger

SAMPLE_RATE = 16000
CLIP_SAMPLES = SAMPLE_RATE

@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioFormatError(f"audio must be mono, got shape {self.samples.shape}")

    def __len__(self) -> int:
        return int(self.samples.size)

    def energy(self) -> float:
        return float(np.sum(self.samples ** 2))

    def fit_length(self, num_samples: int = CLIP_SAMPLES) -> "AudioClip":
        """Zero-pad at the end or crop to exactly num_samples"""
        if self.samples.size >= num_samples:
            return AudioClip(self.samples[:num_samples].copy(), self.sample_rate)
        return AudioClip(np.pad(self.samples, (0, num_samples - self.samples.size)), self.sample_rate)

@dataclass
class FeatureMatrix:
    values: Tensor

    @property
    def num_mfcc(self) -> int:
        return self.values.shape[2]

    @property
    def num_frames(self) -> int:
        return self.values.shape[3]

def read_wav(path: Path) -> AudioClip:
    """Read a 16-bit PCM mono 16 kHz WAV file; anything else is rejected"""
    try:
        sample_rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise AudioFormatError(f"unreadable audio file {path}: {e}") from e
    if data.dtype != np.int16:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {data.dtype}")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono, got {data.shape[1]} channels")
    if sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {sample_rate} Hz")
    return AudioClip(data.astype(np.float64) / 32768.0, sample_rate)

def write_wav(path: Path, clip: AudioClip) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), clip.sample_rate, pcm)
    return path

@lru_cache(maxsize=8)
def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    return librosa.filters.mel(
        sr=cfg.sample_rate, n_fft=cfg.fft_size, n_mels=cfg.num_mel_filters,
        fmin=cfg.fmin, fmax=cfg.fmax,
    )

def mfcc(clip: AudioClip, cfg: MfccConfig) -> FeatureMatrix:
    """Centered framing -> Hann -> |FFT| -> mel -> log -> DCT-II, first num_mfcc coefficients"""

    frame_length, hop = cfg.frame_length, cfg.frame_stride
    if clip.sample_rate != cfg.sample_rate:
        raise AudioFormatError(f"clip sampled at {clip.sample_rate} Hz, features expect {cfg.sample_rate} Hz")
    half = frame_length // 2
    if len(clip) <= half:
        raise AudioFormatError(f"clip of {len(clip)} samples is shorter than one frame after padding")

    padded = np.pad(clip.samples, half, mode="reflect")
    frames = librosa.util.frame(padded, frame_length=frame_length, hop_length=hop)
    window = scipy.signal.get_window("hann", frame_length, fftbins=True)
    spectrum = np.abs(np.fft.rfft(frames * window[:, None], n=cfg.fft_size, axis=0))
    mel_energy = mel_filterbank(cfg) @ spectrum
    log_mel = np.log(np.maximum(mel_energy, cfg.log_floor))
    coefficients = scipy.fft.dct(log_mel, type=2, axis=0, norm="ortho")[:cfg.num_mfcc]
    return FeatureMatrix(Tensor(coefficients[None, None]))

def time_shift(clip: AudioClip, shift_ms: float) -> AudioClip:
    """Displace samples by shift_ms (positive delays), zero-filling the vacated region"""
    if abs(shift_ms) > 100.0:
        raise ValueError(f"time shift must be within +-100 ms, got {shift_ms}")
    shift = int(round(shift_ms * clip.sample_rate / 1000.0))
    shifted = np.zeros_like(clip.samples)
    if shift > 0:
        shifted[shift:] = clip.samples[:-shift]
    elif shift < 0:
        shifted[:shift] = clip.samples[-shift:]
    else:
        shifted[:] = clip.samples
    return AudioClip(shifted, clip.sample_rate)

def noise_slice(noise: AudioClip, offset: int, num_samples: int = CLIP_SAMPLES) -> np.ndarray:
    if len(noise) < num_samples:
        raise ValueError(f"noise of {len(noise)} samples is shorter than {num_samples}")
    if not 0 <= offset <= len(noise) - num_samples:
        raise ValueError(f"noise offset {offset} outside [0, {len(noise) - num_samples}]")
    return noise.samples[offset:offset + num_samples]

def mix_noise(clip: AudioClip, noise: AudioClip, epsilon: float, offset: int = 0) -> AudioClip:
    """(1 - eps) * clip + eps * noise_slice, clamped to [-1, 1]"""
    if not 0.0 <= epsilon <= 0.1:
        raise ValueError(f"noise ratio must lie in [0, 0.1], got {epsilon}")
    if len(noise) < len(clip):
        raise ValueError(f"noise of {len(noise)} samples is shorter than the {len(clip)}-sample clip")
    mixed = (1.0 - epsilon) * clip.samples + epsilon * noise_slice(noise, offset, len(clip))
    return AudioClip(np.clip(mixed, -1.0, 1.0), clip.sample_rate)

def augment(clip: AudioClip, noise_bank: Sequence[AudioClip], rng: np.random.Generator,
            cfg: Optional[AugmentConfig] = None) -> AudioClip:
    """Random time shift, then background noise with probability cfg.noise_probability"""
    cfg = cfg or AugmentConfig()
    shifted = time_shift(clip, rng.uniform(-cfg.max_shift_ms, cfg.max_shift_ms))
    if rng.random() >= cfg.noise_probability:
        return shifted
    if not noise_bank:
        raise ValueError("noise bank is empty but the noise branch was drawn")
    noise = noise_bank[int(rng.integers(len(noise_bank)))]
    if len(noise) < len(shifted):
        raise ValueError(f"noise of {len(noise)} samples is shorter than the clip")
    offset = int(rng.integers(0, len(noise) - len(shifted) + 1))
    epsilon = rng.uniform(0.0, cfg.max_noise_epsilon)
    return mix_noise(shifted, noise, epsilon, offset)

class AudioFrontend:
    """Turns clips into MFCC feature matrices, augmenting training clips"""

    def __init__(self, mfcc_config: MfccConfig, augment_config: Optional[AugmentConfig] = None):
        self.mfcc_config = mfcc_config
        self.augment_config = augment_config or AugmentConfig()
        self.logger = setup_logger("audio_frontend")

    def featurize(self, clip: AudioClip, rng: Optional[np.random.Generator] = None,
                  noise_bank: Sequence[AudioClip] = (), training: bool = False) -> FeatureMatrix:
        clip = clip.fit_length(CLIP_SAMPLES)
        if training:
            if rng is None:
                raise ValueError("training featurization needs a caller-owned generator")
            clip = augment(clip, noise_bank, rng, self.augment_config)
        return mfcc(clip, self.mfcc_config)

    def feature_shape(self) -> tuple:
        return (1, 1, self.mfcc_config.num_mfcc, self.mfcc_config.num_frames(CLIP_SAMPLES))
