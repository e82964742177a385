"""
Binary PGM (P5) reading and writing for images and masks.

Images are stored as 16-bit samples (value = round(65535 * pixel)),
masks as 8-bit class indices. 16-bit samples are big-endian per the
netpbm format.
"""

from pathlib import Path
from typing import Union

import numpy as np

from src.errors import ParseError

PathLike = Union[str, Path]


def write_pgm(path: PathLike, array: np.ndarray, maxval: int) -> None:
    """Write a 2D integer array as a binary PGM."""
    if array.ndim != 2:
        raise ValueError(f"PGM payload must be 2D, got shape {array.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}")
    h, w = array.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    payload = np.ascontiguousarray(array.astype(dtype)).tobytes()
    Path(path).write_bytes(header + payload)


def _read_token(raw: bytes, pos: int, path: PathLike) -> tuple[bytes, int]:
    """Read one whitespace-delimited header token, skipping comments."""
    n = len(raw)
    while pos < n:
        if raw[pos:pos + 1].isspace():
            pos += 1
        elif raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not raw[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError(path, start, "unexpected end of header")
    return raw[start:pos], pos


def read_pgm(path: PathLike) -> tuple[np.ndarray, int]:
    """
    Read a binary PGM.

    Returns:
        (array of shape H x W, maxval)

    Raises:
        ParseError: naming the file and byte offset of the defect
    """
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ParseError(path, 0, f"bad magic {raw[:2]!r}, expected b'P5'")

    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        token_start = pos
        token, pos = _read_token(raw, pos, path)
        try:
            value = int(token)
        except ValueError:
            raise ParseError(path, token_start, f"{label} is not an integer: {token!r}")
        if value <= 0:
            raise ParseError(path, token_start, f"{label} must be positive, got {value}")
        fields.append(value)
    w, h, maxval = fields
    if maxval > 65535:
        raise ParseError(path, pos, f"maxval {maxval} exceeds 65535")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError(path, pos, "missing whitespace after maxval")
    pos += 1

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = w * h * dtype.itemsize
    available = len(raw) - pos
    if available != expected:
        raise ParseError(path, pos, f"payload has {available} bytes, expected {expected}")

    array = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    if array.size and int(array.max()) > maxval:
        flat = int(np.argmax(array.reshape(-1) > maxval))
        raise ParseError(path, pos + flat * dtype.itemsize, f"sample exceeds maxval {maxval}")
    return array.astype(np.int64), maxval
