"""Derived architectures and their line-oriented text file format.

    format_version=1
    num_mfcc=10
    num_frames=51
    omega=1.0
    num_classes=12
    stem_channels=72
    head_channels=144
    layer 0 mbc e=6 k=3 stride=2,2 ch=72
    layer 1 zero stride=1,1 ch=72
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

from supernet.blocks import ZERO, CandidateOpSpec
from utils.errors import ArchitectureParseError
from utils.helpers import atomic_write_text

FORMAT_VERSION = 1

HEADER_FIELDS: Tuple[Tuple[str, type], ...] = (
    ("num_mfcc", int),
    ("num_frames", int),
    ("omega", float),
    ("num_classes", int),
    ("stem_channels", int),
    ("head_channels", int),
)


@dataclass(frozen=True)
class LayerDescription:
    index: int
    op: CandidateOpSpec
    stride: Tuple[int, int]
    channels: int

    def to_line(self) -> str:
        parts = ["layer", str(self.index), self.op.variant]
        if not self.op.is_zero:
            parts += [f"e={self.op.e}", f"k={self.op.k}"]
        parts += [f"stride={self.stride[0]},{self.stride[1]}", f"ch={self.channels}"]
        return " ".join(parts)


@dataclass(frozen=True)
class ArchitectureDescription:
    num_mfcc: int
    num_frames: int
    omega: float
    num_classes: int
    stem_channels: int
    head_channels: int
    layers: Tuple[LayerDescription, ...] = field(default_factory=tuple)

    def skip_flags(self) -> List[bool]:
        """A layer carries a skip connection iff its output shape equals its input shape"""
        flags = []
        channels = self.stem_channels
        for layer in self.layers:
            flags.append(layer.stride == (1, 1) and layer.channels == channels)
            channels = layer.channels
        return flags

    def active_layer_count(self) -> int:
        """Layers left after Zero+skip slots collapse to identities"""
        return sum(1 for layer, skip in zip(self.layers, self.skip_flags()) if not (layer.op.is_zero and skip))

    def labels(self) -> List[str]:
        return [layer.op.label for layer in self.layers]

    def to_text(self) -> str:
        lines = [f"format_version={FORMAT_VERSION}"]
        for name, _ in HEADER_FIELDS:
            value = getattr(self, name)
            lines.append(f"{name}={repr(float(value)) if isinstance(value, float) else value}")
        lines.extend(layer.to_line() for layer in self.layers)
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> Path:
        return atomic_write_text(Path(path), self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureDescription":
        header: Dict[str, object] = {}
        layers: List[LayerDescription] = []
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("layer "):
                if len(header) < len(HEADER_FIELDS) + 1:
                    raise ArchitectureParseError(line_number, "layer line before the header is complete")
                layer = _parse_layer(line, line_number)
                if layer.index != len(layers):
                    raise ArchitectureParseError(line_number, f"expected layer {len(layers)}, got {layer.index}")
                layers.append(layer)
                continue
            if layers:
                raise ArchitectureParseError(line_number, "header line after layer lines")
            key, sep, value = line.partition("=")
            if not sep:
                raise ArchitectureParseError(line_number, f"expected key=value, got {line!r}")
            header[key.strip()] = _parse_header_value(key.strip(), value.strip(), line_number)

        if "format_version" not in header:
            raise ArchitectureParseError(1, "missing format_version")
        missing = [name for name, _ in HEADER_FIELDS if name not in header]
        if missing:
            raise ArchitectureParseError(len(text.splitlines()), f"missing header field {missing[0]}")
        header.pop("format_version")
        return cls(layers=tuple(layers), **header)

    @classmethod
    def load(cls, path: Path) -> "ArchitectureDescription":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise ArchitectureParseError(1, f"{path} is not a text file: {e}") from e
        return cls.from_text(text)


def _parse_header_value(key: str, value: str, line_number: int):
    if key == "format_version":
        if value != str(FORMAT_VERSION):
            raise ArchitectureParseError(line_number, f"unsupported format_version {value}")
        return int(value)
    types = dict(HEADER_FIELDS)
    if key not in types:
        raise ArchitectureParseError(line_number, f"unknown header field {key!r}")
    try:
        parsed = types[key](value)
    except ValueError:
        raise ArchitectureParseError(line_number, f"{key} must be {types[key].__name__}, got {value!r}") from None
    if parsed <= 0:
        raise ArchitectureParseError(line_number, f"{key} must be positive")
    return parsed


def _parse_layer(line: str, line_number: int) -> LayerDescription:
    tokens = line.split()
    if len(tokens) < 3:
        raise ArchitectureParseError(line_number, "layer line needs an index and a variant")
    try:
        index = int(tokens[1])
    except ValueError:
        raise ArchitectureParseError(line_number, f"layer index must be an integer, got {tokens[1]!r}") from None

    variant = tokens[2]
    fields: Dict[str, str] = {}
    for token in tokens[3:]:
        key, sep, value = token.partition("=")
        if not sep or key in fields:
            raise ArchitectureParseError(line_number, f"malformed or repeated field {token!r}")
        fields[key] = value

    expected = {"stride", "ch"} | ({"e", "k"} if variant == "mbc" else set())
    if variant not in ("zero", "mbc"):
        raise ArchitectureParseError(line_number, f"unknown op {variant!r}")
    if set(fields) != expected:
        raise ArchitectureParseError(line_number, f"{variant} layer needs fields {sorted(expected)}, got {sorted(fields)}")

    try:
        stride_h, stride_w = (int(v) for v in fields["stride"].split(","))
        channels = int(fields["ch"])
        op = ZERO if variant == "zero" else CandidateOpSpec("mbc", int(fields["e"]), int(fields["k"]))
    except ValueError as e:
        raise ArchitectureParseError(line_number, f"bad layer field: {e}") from None
    if stride_h < 1 or stride_w < 1 or channels < 1:
        raise ArchitectureParseError(line_number, "stride and channel values must be positive")
    return LayerDescription(index, op, (stride_h, stride_w), channels)
