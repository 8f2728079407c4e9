"""
RGDF checkpoint container: a flat binary file of named float32 arrays.

Layout (little-endian):
    magic b"RGDF" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | rank u32 | dims u64 * rank | float32 * prod(dims)
"""
import os
import struct
import tempfile

import numpy as np

from src.errors import ParseError

MAGIC = b"RGDF"
VERSION = 1


def atomic_write(path: str, payload: bytes):
    """Write through a temp file in the target directory, then rename over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def encode_arrays(arrays: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, array in arrays.items():
        array = np.asarray(array)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_arrays(payload: bytes) -> dict:
    if payload[:4] != MAGIC:
        raise ParseError(f"not an RGDF checkpoint (magic {payload[:4]!r})")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise ParseError(f"unsupported RGDF version {version}")
    offset = 12
    arrays = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            arrays[name] = values.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as e:
        raise ParseError(f"truncated RGDF checkpoint: {e}")
    if offset != len(payload):
        raise ParseError(f"{len(payload) - offset} trailing bytes after {count} entries")
    return arrays


def save_arrays(path: str, arrays: dict):
    atomic_write(path, encode_arrays(arrays))


def load_arrays(path: str) -> dict:
    with open(path, "rb") as handle:
        return decode_arrays(handle.read())
