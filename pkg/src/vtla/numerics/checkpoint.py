"""Weight checkpoint file format.

Layout: magic b"VTLF", version u16 LE, then a sequence of records until EOF.
Each record: name (u16 length + utf-8), shape (u8 ndim + u32 dims LE), and a
little-endian f32 payload. Metadata entries are zero-length records whose name
encodes "__meta__:key=value". Round-trips are byte-exact.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import CompatibilityError
from .tensor import Tensor

MAGIC = b"VTLF"
VERSION = 1
_META_PREFIX = "__meta__:"


def _write_record(buf, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def serialize(records: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    for key in sorted(meta or {}):
        value = (meta or {})[key]
        _write_record(buf, f"{_META_PREFIX}{key}={value}", np.zeros((0,), dtype=np.float32))
    for name, arr in records.items():
        _write_record(buf, name, np.asarray(arr))
    return buf.getvalue()


def deserialize(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if data[:4] != MAGIC:
        raise CompatibilityError(f"bad checkpoint magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise CompatibilityError(f"unsupported checkpoint version {version}")
    pos = 6
    records: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    total = len(data)
    while pos < total:
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = []
        for _ in range(ndim):
            (d,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape.append(d)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        if name.startswith(_META_PREFIX):
            key, _, value = name[len(_META_PREFIX):].partition("=")
            meta[key] = value
        else:
            records[name] = payload.copy()
    return records, meta


def save_checkpoint(path, records: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(serialize(records, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return deserialize(Path(path).read_bytes())


def save_params(path, params: dict[str, Tensor], meta: dict[str, str] | None = None) -> None:
    save_checkpoint(path, {name: p.data for name, p in params.items()}, meta)
