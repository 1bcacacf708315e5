"""Packed k-bit weight export.

Layout (all integers little-endian):

    b"KWSQ" | u16 version | u16 bits | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 rank | u32 dims[rank] | u8 bits
                | u32 payload bytes | level indices, k bits each, LSB first
"""

import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from quantization.quantizer import QuantizerSpec, dequantize_indices, level_indices
from utils.errors import CheckpointError
from utils.helpers import atomic_write_bytes

MAGIC = b"KWSQ"
EXPORT_VERSION = 2


def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    flat = np.asarray(indices, dtype=np.uint8).reshape(-1)
    # one row of k bits per index, least significant bit first
    bit_rows = np.unpackbits(flat[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(bit_rows.reshape(-1), bitorder="little").tobytes()


def unpack_indices(payload: bytes, count: int, bits: int) -> np.ndarray:
    stream = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")[:count * bits]
    rows = np.zeros((count, 8), dtype=np.uint8)
    rows[:, :bits] = stream.reshape(count, bits)
    return np.packbits(rows, axis=1, bitorder="little").reshape(-1).astype(np.int64)


def export_packed(model, spec: QuantizerSpec, path: Path) -> Path:
    """Write the quantize-flagged weights of a model as packed level indices"""
    tensors = [(name, p.data) for name, p in model.named_parameters() if p.quantize]
    parts: List[bytes] = [MAGIC, struct.pack("<HHI", EXPORT_VERSION, spec.bits, len(tensors))]
    for name, data in tensors:
        encoded = name.encode("utf-8")
        payload = pack_indices(level_indices(data, spec), spec.bits)
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{data.ndim}IB", data.ndim, *data.shape, spec.bits))
        parts.append(struct.pack("<I", len(payload)) + payload)
    return atomic_write_bytes(Path(path), b"".join(parts))


def import_packed(path: Path) -> Tuple[int, Dict[str, np.ndarray]]:
    """(bits, name -> dequantized weights)"""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a packed weight file")
    try:
        version, bits, count = struct.unpack_from("<HHI", raw, 4)
        if version != EXPORT_VERSION:
            raise CheckpointError(f"{path}: unsupported export version {version}")
        spec = QuantizerSpec(bits)
        offset = 12
        weights: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            shape = struct.unpack_from(f"<{rank}I", raw, offset + 1)
            offset += 1 + 4 * rank
            (tensor_bits,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            if tensor_bits != bits:
                raise CheckpointError(f"{path}: tensor {name} packed at {tensor_bits} bits, file header says {bits}")
            (size,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            indices = unpack_indices(raw[offset:offset + size], int(np.prod(shape)), bits)
            offset += size
            weights[name] = dequantize_indices(indices, spec).reshape(shape)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path} is truncated or corrupt: {e}") from e
    return bits, weights
