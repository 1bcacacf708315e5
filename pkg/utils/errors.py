from pathlib import Path
from typing import Optional


class KwsNasError(Exception):
    """Base class for all toolkit failures"""


class ShapeError(KwsNasError, ValueError):
    """Tensor or layer shapes do not agree"""


class ConfigError(KwsNasError, ValueError):
    """A configuration field holds an invalid value"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class AudioFormatError(KwsNasError):
    """Audio file is unreadable or not 16-bit PCM mono 16 kHz"""


class DatasetError(KwsNasError):
    """Dataset layout, manifest or split problems"""


class ArchitectureParseError(KwsNasError):
    """Architecture file could not be parsed"""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class CheckpointError(KwsNasError):
    """Checkpoint container is missing, corrupt or of an unknown version"""


class CostModelError(KwsNasError, ValueError):
    """Cost model inputs outside their domain"""


class DivergenceError(KwsNasError):
    """Training produced a non-finite loss"""

    def __init__(self, message: str, last_checkpoint: Optional[Path] = None):
        self.last_checkpoint = last_checkpoint
        suffix = f" (last good checkpoint: {last_checkpoint})" if last_checkpoint else " (no checkpoint written yet)"
        super().__init__(message + suffix)
