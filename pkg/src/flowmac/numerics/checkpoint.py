"""Self-describing parameter checkpoint container.

Binary layout (all integers little-endian):

    magic    4 bytes  b"FMCK"
    version  u8       currently 1
    meta_len u32      length of UTF-8 JSON metadata blob
    meta     bytes    arbitrary string->string metadata
    count    u32      number of named arrays
    entries  repeated:
        name_len u16, name utf-8
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     u32 * ndim
        data     raw little-endian values

The version field is mandatory and checked on load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FMCK"
VERSION = 1

_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<B", VERSION)
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    blob += struct.pack("<I", len(meta))
    blob += meta
    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        le = "<f4" if arr.dtype == np.float32 else "<f8"
        blob += np.ascontiguousarray(arr).astype(le, copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<B", raw, off)
    off += 1
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    metadata = json.loads(raw[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode()
        off += name_len
        tag, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dtype = _TAG_DTYPES[tag]
        n_elems = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if n_elems:
            arr = np.frombuffer(raw, dtype=dtype, count=n_elems, offset=off)
        else:
            arr = np.empty(0, dtype=dtype)
        off += n_elems * dtype.itemsize
        arrays[name] = arr.reshape(dims).astype(dtype.newbyteorder("="))
    return arrays, metadata
