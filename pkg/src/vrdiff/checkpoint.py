"""Self-describing checkpoint container.

Layout (all little-endian):

    magic    4 bytes  b"VRCP"
    version  u16      (currently 1)
    meta_len u32      followed by meta_len bytes of UTF-8 JSON metadata
    count    u32      number of named blocks
    blocks   count times:
        name_len u16, name UTF-8
        ndim     u8,  then ndim u32 dimensions
        data     prod(dims) little-endian f32

Blocks are written in sorted name order, so identical content gives
identical bytes. Values are float32 on disk; training state is float64 in
memory, so a save/load round trip truncates to f32 precision.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"VRCP"
VERSION = 1


def write_checkpoint(path, blocks: dict[str, np.ndarray], meta: dict) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(blocks)))
        for name in sorted(blocks):
            arr = np.asarray(blocks[name])
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes())


def read_checkpoint(path):
    """Returns (blocks: {name: float32 ndarray}, meta: dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        (version,) = struct.unpack_from("<H", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 6
        (meta_len,) = struct.unpack_from("<I", data, off)
        off += 4
        meta = json.loads(data[off : off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            end = off + 4 * n
            if end > len(data):
                raise FormatError(f"{path}: truncated block {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy().reshape(shape)
            off += 4 * n
            if name in blocks:
                raise FormatError(f"{path}: duplicate block {name!r}")
            blocks[name] = arr
        if off != len(data):
            raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    except (struct.error, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed container: {exc}") from exc
    return blocks, meta
