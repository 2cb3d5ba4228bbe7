"""Binary tensor container used for checkpoints and weight import/export.

Layout (all integers little-endian)::

    b"T2FL"  uint32 version
    repeated until EOF:
        uint32 name_length, name (UTF-8), uint32 rank, rank x uint64 extents,
        prod(extents) x float64 payload

Entries keep their insertion order, so writing the same mapping twice gives
identical bytes.
"""

from __future__ import annotations

import hashlib
import os
import struct
from typing import Mapping

import numpy as np

from .errors import DataError

MAGIC = b"T2FL"
VERSION = 1


def encode_container(tensors: Mapping[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<I", version)]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_container(blob: bytes, expected_version: int = VERSION) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError("not a T2FL container (bad magic bytes)")
    if len(blob) < 8:
        raise DataError("truncated container header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != expected_version:
        raise DataError(f"container version {version} is not supported (expected {expected_version})")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 8 * count
            if end > len(blob):
                raise DataError(f"container entry {name!r} is truncated")
            out[name] = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
            pos = end
    except struct.error:
        raise DataError("truncated container entry") from None
    return out


def write_container(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_container(tensors))


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read container {path}: {exc.strerror}") from None
    return decode_container(blob)


def text_to_array(text: str) -> np.ndarray:
    """Store UTF-8 text as a rank-1 tensor of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def array_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8).tolist()).decode("utf-8")


def tensor_digest(tensors: Mapping[str, object]) -> str:
    """SHA-256 over names, shapes and float64 bytes; used to prove weights stayed frozen."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        value = tensors[name]
        arr = np.array(getattr(value, "data", value), dtype="<f8", order="C")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
