"""
Binary checkpoint format for named float32 tensors.

Layout (little-endian): magic b"ZSSL1\\0", u16 version, u32 tensor count,
then per tensor u16 name length, UTF-8 name, u8 ndim, u32 dims, float32
payload; a trailing CRC32 covers every preceding byte.
"""

import logging
import struct
import zlib
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from src.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"ZSSL1\0"
VERSION = 1


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialise tensors in mapping order."""
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        data = np.asarray(array, dtype="<f4")
        if not 1 <= data.ndim <= 255:
            raise CheckpointError(f"tensor '{name}' has unsupported rank {data.ndim}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: on bad magic, CRC mismatch, truncation or unknown version
    """
    if len(raw) < len(MAGIC) + 10 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch, refusing to load")

    pos = len(MAGIC)
    version, count = struct.unpack_from("<HI", body, pos)
    pos += 6
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")

    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(dims))
            if pos + 4 * size > len(body):
                raise CheckpointError(f"{source}: tensor '{name}' runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as e:
        raise CheckpointError(f"{source}: truncated at byte {pos}: {e}")
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes")
    return tensors


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors))
    logger.info(f"Wrote checkpoint {path} ({len(tensors)} tensors)")


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def split_prefix(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Select entries under 'prefix.' and strip the prefix."""
    head = f"{prefix}."
    return {name[len(head):]: array for name, array in tensors.items() if name.startswith(head)}


def join_prefix(prefix: str, tensors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": array for name, array in tensors.items()}
