import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from utils.errors import ConfigError

# Load environment variables
load_dotenv()

NUM_MFCC_CHOICES = (10, 20, 30, 40)
OMEGA_CHOICES = (0.75, 1.0, 1.25)
BETA_CHOICES = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)

@dataclass(frozen=True)
class MfccConfig:
    num_mfcc: int = 10
    frame_length_ms: float = 40.0
    frame_stride_ms: float = 20.0
    num_mel_filters: int = 40
    fft_size: int = 1024  # a 640-sample frame does not fit a 512-point FFT
    log_floor: float = 1e-10
    fmin: float = 20.0
    fmax: float = 8000.0
    sample_rate: int = 16000

    @property
    def frame_length(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def frame_stride(self) -> int:
        return int(round(self.sample_rate * self.frame_stride_ms / 1000.0))

    def num_frames(self, num_samples: int) -> int:
        # centered framing pads half a frame on both sides
        return 1 + num_samples // self.frame_stride

    def validate(self) -> None:
        if self.num_mfcc <= 0:
            raise ConfigError("num_mfcc", "must be positive")
        if self.frame_length_ms < self.frame_stride_ms:
            raise ConfigError("frame_length_ms", "must be >= frame_stride_ms")
        if self.num_mfcc > self.num_mel_filters:
            raise ConfigError("num_mfcc", f"must be <= num_mel_filters ({self.num_mel_filters})")
        if self.fft_size < self.frame_length:
            raise ConfigError("fft_size", f"must be >= frame length ({self.frame_length} samples)")
        if self.log_floor <= 0:
            raise ConfigError("log_floor", "must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError("fmax", "need 0 <= fmin < fmax <= sample_rate/2")

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

@dataclass(frozen=True)
class AugmentConfig:
    max_shift_ms: float = 100.0
    noise_probability: float = 0.8
    max_noise_epsilon: float = 0.1

    def validate(self) -> None:
        if not 0 <= self.max_shift_ms <= 100.0:
            raise ConfigError("max_shift_ms", "must lie in [0, 100]")
        if not 0 <= self.noise_probability <= 1:
            raise ConfigError("noise_probability", "must lie in [0, 1]")
        if not 0 <= self.max_noise_epsilon <= 0.1:
            raise ConfigError("max_noise_epsilon", "must lie in [0, 0.1]")

@dataclass(frozen=True)
class SupernetConfig:
    omega: float = 1.0
    base_channels: int = 72
    num_layers: int = 12
    num_classes: int = 12
    expansion_rates: Tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    kernel_sizes: Tuple[int, ...] = (3, 5, 7)

    def validate(self) -> None:
        if self.omega <= 0:
            raise ConfigError("omega", "must be positive")
        if self.base_channels <= 0:
            raise ConfigError("base_channels", "must be positive")
        if self.num_layers < 1:
            raise ConfigError("num_layers", "must be at least 1")
        if not 2 <= self.num_classes <= 12:
            raise ConfigError("num_classes", "must lie in [2, 12]")
        if not self.expansion_rates or any(not 1 <= e <= 6 for e in self.expansion_rates):
            raise ConfigError("expansion_rates", "values must lie in [1, 6]")
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError("kernel_sizes", "values must be odd and positive")

@dataclass(frozen=True)
class TradeoffConfig:
    beta: float = 8.0
    ops_target: float = 20e6

    def validate(self) -> None:
        if self.beta < 0:
            raise ConfigError("beta", "must be >= 0")
        if self.ops_target <= 1:
            raise ConfigError("ops_target", "must be > 1")

@dataclass(frozen=True)
class SearchSchedule:
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.05
    search_epochs: int = 120
    search_lr: float = 0.2
    retrain_epochs: int = 120
    batch_size: int = 100
    lr_schedule: str = "cosine"
    arch_lr: float = 3e-3

    def validate(self) -> None:
        for name in ("pretrain_epochs", "search_epochs", "retrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("pretrain_lr", "search_lr", "arch_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2 (batch norm needs two samples)")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule", "must be 'cosine' or 'constant'")

@dataclass(frozen=True)
class RunConfig:
    dataset: str = "toy"
    quant_bits: Optional[int] = 8
    seed: int = 0
    output_dir: Path = Path("output")
    toy_classes: int = 4
    toy_samples_per_class: int = 200

    def validate(self) -> None:
        if self.quant_bits is not None and not 1 <= self.quant_bits <= 8:
            raise ConfigError("quant_bits", "must lie in [1, 8] or be 'off'")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if not 2 <= self.toy_classes <= 12:
            raise ConfigError("toy_classes", "must lie in [2, 12]")
        if self.toy_samples_per_class < 1:
            raise ConfigError("toy_samples_per_class", "must be positive")

@dataclass(frozen=True)
class Settings:
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    tradeoff: TradeoffConfig = field(default_factory=TradeoffConfig)
    schedule: SearchSchedule = field(default_factory=SearchSchedule)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def is_toy(self) -> bool:
        return self.run.dataset == "toy"

    def validate(self) -> "Settings":
        for section in (self.mfcc, self.augment, self.supernet, self.tradeoff, self.schedule, self.run):
            section.validate()
        return self

def _parse_int_tuple(raw: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in str(raw).replace(";", ",").split(",") if v.strip())

def _parse_bits(raw: Any) -> Optional[int]:
    if raw is None:
        return None
    text = str(raw).strip().lower()
    if text in ("off", "none", "32", "fp32"):
        return None
    return int(text)

def _parse_choice(choices: Tuple[float, ...]) -> Callable[[Any], float]:
    def parse(raw: Any) -> float:
        value = float(raw)
        if value not in choices:
            raise ValueError(f"expected one of {', '.join(str(c) for c in choices)}")
        return value
    return parse

def _parse_num_mfcc(raw: Any) -> int:
    value = int(raw)
    if value not in NUM_MFCC_CHOICES:
        raise ValueError(f"expected one of {NUM_MFCC_CHOICES}")
    return value

# flat key -> (section, attribute, parser)
FIELD_MAP: Dict[str, Tuple[str, str, Callable[[Any], Any]]] = {
    "num_mfcc": ("mfcc", "num_mfcc", _parse_num_mfcc),
    "frame_length_ms": ("mfcc", "frame_length_ms", float),
    "frame_stride_ms": ("mfcc", "frame_stride_ms", float),
    "num_mel_filters": ("mfcc", "num_mel_filters", int),
    "fft_size": ("mfcc", "fft_size", int),
    "log_floor": ("mfcc", "log_floor", float),
    "max_shift_ms": ("augment", "max_shift_ms", float),
    "noise_probability": ("augment", "noise_probability", float),
    "max_noise_epsilon": ("augment", "max_noise_epsilon", float),
    "omega": ("supernet", "omega", _parse_choice(OMEGA_CHOICES)),
    "base_channels": ("supernet", "base_channels", int),
    "num_layers": ("supernet", "num_layers", int),
    "num_classes": ("supernet", "num_classes", int),
    "expansion_rates": ("supernet", "expansion_rates", _parse_int_tuple),
    "kernel_sizes": ("supernet", "kernel_sizes", _parse_int_tuple),
    "beta": ("tradeoff", "beta", _parse_choice(BETA_CHOICES)),
    "ops_target": ("tradeoff", "ops_target", float),
    "pretrain_epochs": ("schedule", "pretrain_epochs", int),
    "pretrain_lr": ("schedule", "pretrain_lr", float),
    "search_epochs": ("schedule", "search_epochs", int),
    "search_lr": ("schedule", "search_lr", float),
    "retrain_epochs": ("schedule", "retrain_epochs", int),
    "batch_size": ("schedule", "batch_size", int),
    "lr_schedule": ("schedule", "lr_schedule", str),
    "arch_lr": ("schedule", "arch_lr", float),
    "dataset": ("run", "dataset", str),
    "quant_bits": ("run", "quant_bits", _parse_bits),
    "seed": ("run", "seed", int),
    "output_dir": ("run", "output_dir", Path),
    "toy_classes": ("run", "toy_classes", int),
    "toy_samples_per_class": ("run", "toy_samples_per_class", int),
}

ENV_PREFIX = "KWS_"

def apply_overrides(settings: Settings, overrides: Mapping[str, Any]) -> Settings:
    """Return a copy of settings with flat key=value overrides applied"""

    sections = {name: getattr(settings, name) for name in ("mfcc", "augment", "supernet", "tradeoff", "schedule", "run")}
    for key, raw in overrides.items():
        if raw is None:
            continue
        normalized = key.strip().lower().replace("-", "_")
        if normalized not in FIELD_MAP:
            raise ConfigError(normalized, "unknown configuration key")
        section, attr, parser = FIELD_MAP[normalized]
        try:
            value = parser(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(normalized, f"invalid value {raw!r}: {e}") from e
        sections[section] = replace(sections[section], **{attr: value})
    return Settings(**sections)

def read_config_file(path: Path) -> Dict[str, str]:
    """Parse a flat key=value config file"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    return {k: v for k, v in dotenv_values(path).items() if v is not None}

def load_settings(config_path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> Settings:
    """Load configuration: defaults < KWS_* environment < config file < overrides"""

    env_values = {
        key[len(ENV_PREFIX):].lower(): value
        for key, value in os.environ.items()
        if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):].lower() in FIELD_MAP
    }
    settings = apply_overrides(Settings(), env_values)

    if config_path is not None:
        settings = apply_overrides(settings, read_config_file(config_path))

    if overrides:
        settings = apply_overrides(settings, overrides)

    return settings.validate()
