"""Embedding tables and the L2 / concat / truncated-SVD blend.

Binary table layout (little-endian)::

    magic   b"MMEMB\\0"        6 bytes
    version uint16
    n_videos uint64, width uint64
    n_videos rows of: vid int64, width x float64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MMEMB\0"
TABLE_VERSION = 1
_HEADER = struct.Struct("<6sHQQ")


class TableFormatError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    vids: np.ndarray     # [N] int64
    matrix: np.ndarray   # [N, width] float64

    def __post_init__(self):
        self.vids = np.asarray(self.vids, dtype=np.int64)
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.vids.shape[0]:
            raise ValueError(f"table shape mismatch: {self.vids.shape[0]} ids vs matrix {self.matrix.shape}")
        if np.unique(self.vids).size != self.vids.size:
            raise ValueError("duplicate video ids in embedding table")
        if not np.isfinite(self.matrix).all():
            raise ValueError("non-finite values in embedding table")

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.vids.shape[0]

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(v): row for v, row in zip(self.vids, self.matrix)}

    def sorted(self) -> EmbeddingTable:
        order = np.argsort(self.vids, kind="stable")
        return EmbeddingTable(self.vids[order], self.matrix[order])

    def subset(self, vids) -> EmbeddingTable:
        pos = {int(v): i for i, v in enumerate(self.vids)}
        idx = [pos[int(v)] for v in vids]
        return EmbeddingTable(self.vids[idx], self.matrix[idx])


def l2_normalize(table: EmbeddingTable) -> EmbeddingTable:
    norms = np.linalg.norm(table.matrix, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"cannot normalise zero embedding of video {int(table.vids[zero[0]])}")
    return EmbeddingTable(table.vids.copy(), table.matrix / norms[:, None])


def concat(tables: list[EmbeddingTable]) -> EmbeddingTable:
    """Column-wise join aligned by id; rows come out in ascending id order."""
    if not tables:
        raise ValueError("concat needs at least one table")
    ref = set(tables[0].vids.tolist())
    for t in tables[1:]:
        other = set(t.vids.tolist())
        if other != ref:
            diff = sorted(ref ^ other)
            raise ValueError(f"embedding tables cover different videos; symmetric difference {diff[:20]}")
    aligned = [t.sorted() for t in tables]
    return EmbeddingTable(aligned[0].vids, np.concatenate([t.matrix for t in aligned], axis=1))


def top_right_singular_vectors(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k right singular vectors of ``x`` (columns) and singular values, largest first.

    Each vector is sign-fixed so its largest-magnitude entry is positive.
    """
    gram = x.T @ x
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(-evals, kind="stable")[:k]
    vecs = evecs[:, order]
    pivot = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    sing = np.sqrt(np.clip(evals[order], 0.0, None))
    return vecs * signs, sing


def svd_reduce(table: EmbeddingTable, k: int = 256, fit: EmbeddingTable | None = None) -> EmbeddingTable:
    """Project onto the top-k right singular vectors of the uncentered ``fit`` matrix."""
    if k > table.width:
        raise ValueError(f"k={k} exceeds table width {table.width}")
    if k <= 0:
        raise ValueError("k must be positive")
    basis_src = table if fit is None else fit
    if basis_src.width != table.width:
        raise ValueError("fit table width differs from the table being reduced")
    vk, _ = top_right_singular_vectors(basis_src.matrix, k)
    return EmbeddingTable(table.vids.copy(), table.matrix @ vk)


def blend(tables: list[EmbeddingTable], k: int = 256, fit: list[EmbeddingTable] | None = None) -> EmbeddingTable:
    joined = concat([l2_normalize(t) for t in tables])
    fit_joined = None if fit is None else concat([l2_normalize(t) for t in fit])
    return svd_reduce(joined, min(k, joined.width), fit_joined)


# ----------------------------------------------------------------------------
# files


def save_table(table: EmbeddingTable, path) -> None:
    path = Path(path)
    n, w = table.matrix.shape
    rec = np.zeros(n, dtype=np.dtype([("vid", "<i8"), ("row", "<f8", (w,))]))
    rec["vid"] = table.vids
    rec["row"] = table.matrix
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, TABLE_VERSION, n, w))
        fh.write(rec.tobytes())
    tmp.replace(path)


def load_table(path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TableFormatError(f"{path}: truncated header")
    magic, version, n, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TableFormatError(f"{path}: not an embedding table")
    if version != TABLE_VERSION:
        raise TableFormatError(f"{path}: version {version} unsupported (expected {TABLE_VERSION})")
    dt = np.dtype([("vid", "<i8"), ("row", "<f8", (w,))])
    body = raw[_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise TableFormatError(f"{path}: expected {n} rows of {dt.itemsize} bytes, found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dt)
    return EmbeddingTable(rec["vid"].astype(np.int64), rec["row"].astype(np.float64).reshape(n, w))


def export_text(table: EmbeddingTable, path) -> None:
    """Inspection dump: ``vid<TAB>v1,v2,...`` per row."""
    with open(path, "w") as fh:
        for vid, row in zip(table.vids, table.matrix):
            fh.write(f"{int(vid)}\t{','.join(repr(float(v)) for v in row)}\n")
