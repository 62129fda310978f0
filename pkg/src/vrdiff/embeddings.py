"""Per-residue embedding tables and receptor feature assembly.

The table file is the contract with the external embedding exporter:

    magic   4 bytes  b"EMBT"
    version u16 LE   (currently 1)
    tag_len u16 LE   followed by tag_len bytes of UTF-8 model tag
    count   u32 LE   number of rows
    dim     u32 LE   entries per row
    rows    count times: residue_index i32 LE, then dim little-endian f32

Rows are stored sorted by residue index; values are float32 on disk and in
memory, so write/read is lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataio import AMINO_ACIDS, residue_onehot
from .diffcore import MlpParams, mlp_forward
from .errors import FormatError, ShapeError
from .geometry import AtomCloud

MAGIC = b"EMBT"
VERSION = 1


@dataclass
class EmbeddingTable:
    model_tag: str
    dim: int
    rows: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for idx, vec in self.rows.items():
            v = np.asarray(vec, dtype=np.float32)
            if v.shape != (self.dim,):
                raise ShapeError(f"row {idx} has shape {v.shape}, expected ({self.dim},)")
            if not np.isfinite(v).all():
                raise ShapeError(f"row {idx} has non-finite entries")
            clean[int(idx)] = v
        self.rows = clean


def write_embedding_file(table: EmbeddingTable, path) -> None:
    tag = table.model_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<II", len(table.rows), table.dim))
        for idx in sorted(table.rows):
            fh.write(struct.pack("<i", idx))
            fh.write(table.rows[idx].astype("<f4").tobytes())


def read_embedding_file(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, tag_len = struct.unpack_from("<HH", data, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 8
        tag = data[off : off + tag_len].decode("utf-8")
        off += tag_len
        count, dim = struct.unpack_from("<II", data, off)
        off += 8
        rows: dict[int, np.ndarray] = {}
        row_bytes = 4 + 4 * dim
        if len(data) - off != count * row_bytes:
            raise FormatError(
                f"{path}: truncated or padded: {len(data) - off} row bytes, "
                f"expected {count * row_bytes}"
            )
        for _ in range(count):
            (idx,) = struct.unpack_from("<i", data, off)
            off += 4
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
            off += 4 * dim
            if idx in rows:
                raise FormatError(f"{path}: duplicate residue index {idx}")
            rows[idx] = vec
    except struct.error as exc:
        raise FormatError(f"{path}: truncated header: {exc}") from exc
    return EmbeddingTable(model_tag=tag, dim=dim, rows=rows)


def assemble_receptor_features(pocket: AtomCloud, table: EmbeddingTable, proj: MlpParams) -> AtomCloud:
    """Replace each C-alpha's features with its projected residue embedding.

    Pure lookup plus linear map; positions are untouched. Missing residue
    indices raise with the full sorted list.
    """
    if pocket.residue_index is None:
        raise ShapeError("pocket has no residue_index")
    missing = sorted({int(i) for i in pocket.residue_index} - set(table.rows))
    if missing:
        raise FormatError(f"residue indices missing from table: {missing}")
    raw = np.stack([table.rows[int(i)] for i in pocket.residue_index]).astype(float)
    feats = mlp_forward(proj, torch.as_tensor(raw, dtype=torch.float64))
    return pocket.with_features(feats.detach().numpy())


def one_hot_fallback(pocket: AtomCloud, proj: MlpParams | None = None) -> AtomCloud:
    """20-dim amino-acid one-hots, optionally projected to the model width.

    Used when no embedding file is supplied.
    """
    if pocket.residue_types is None:
        raise ShapeError("pocket has no residue type labels")
    feats = residue_onehot(pocket.residue_types)
    if proj is not None:
        feats = mlp_forward(proj, torch.as_tensor(feats, dtype=torch.float64)).detach().numpy()
    return pocket.with_features(feats)


def onehot_table(residue_types: str, offset: int = 0, tag: str = "onehot") -> EmbeddingTable:
    """An EmbeddingTable holding plain one-hots (the No-ESM ablation path)."""
    feats = residue_onehot(residue_types)
    return EmbeddingTable(
        model_tag=tag,
        dim=len(AMINO_ACIDS),
        rows={offset + i: feats[i] for i in range(len(residue_types))},
    )
