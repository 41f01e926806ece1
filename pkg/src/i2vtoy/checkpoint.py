"""Binary named-array checkpoint format.

Layout (all integers little-endian)::

    b"ATMV" | u32 version=1 | u32 array_count
    per array, sorted by name:
        u16 name_len | name (UTF-8) | u8 dtype (0=f32, 1=i64) | u8 rank
        | u32 dims[rank] | raw payload
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"ATMV"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
TAGS = {np.dtype("float32"): 0, np.dtype("int64"): 1}


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})" if offset is not None else message)


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype not in TAGS:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"array name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[TAGS[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16:
        raise CheckpointError("file too short for a checkpoint header", len(blob))
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}", 0)
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if pos + n > len(body):
            raise CheckpointError(f"truncated while reading {what}", pos)

    for _ in range(count):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        need(nlen, "name")
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        need(2, f"header of {name!r}")
        tag, rank = struct.unpack_from("<BB", body, pos)
        if tag not in DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name!r}", pos)
        pos += 2
        need(4 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        dt = DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes before checksum", pos)
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC32 mismatch", len(body))
    return out


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_arrays(arrays))
    tmp.replace(path)


def load_arrays(path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())


def text_array(text: str) -> np.ndarray:
    """Store a UTF-8 string as an i64 byte array (the format has no string dtype)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def array_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.int64).astype(np.uint8)).decode("utf-8")


def json_array(obj) -> np.ndarray:
    return text_array(json.dumps(obj, sort_keys=True))


def array_json(arr: np.ndarray):
    return json.loads(array_text(arr))
