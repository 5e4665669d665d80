"""
Checkpoint files.

Little-endian layout: magic ``DLXA``, format version (u32), parameter count
(u64), then for every parameter its name length (u16), UTF-8 name, rank (u8),
one u32 per dimension and the values as 32-bit floats in row-major order.
"""

import logging
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"DLXA"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or of an unknown version."""

    pass


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(tensors)))
        for name, value in tensors.items():
            value = np.asarray(value)
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise CheckpointError(f"Parameter name too long: '{name[:40]}...'")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(value.astype("<f4").tobytes(order="C"))
    log.debug(f"Wrote {len(tensors)} tensors to '{path}'")
    return path


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Read a checkpoint; values are widened to 64-bit floats."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version} in '{path}'")
    offset = 16
    tensors = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            values = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors[name] = values.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"Truncated or corrupt checkpoint '{path}': {e}") from e
    return tensors


def select_prefix(tensors: Mapping[str, np.ndarray], prefixes) -> dict[str, np.ndarray]:
    """Keep the tensors whose name starts with one of ``prefixes``."""
    prefixes = tuple(prefixes)
    return {name: value for name, value in tensors.items() if name.startswith(prefixes)}
