"""Embedded exact-cosine vector index with a checksummed binary file format.

File layout (all integers little-endian)::

    b"SCVD" | u8 version=1 | u32 dim | u64 count
    count x ( u64 id | u32 ref_len | ref utf-8 | dim x f64 )
    u64 FNV-1a 64 checksum of every preceding byte

The store is built by a single writer and becomes read-only after
``freeze()`` or ``load()``; searching while inserting is not supported.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from ._util import fnv1a_64, write_atomic
from .embedding import EmbeddingVector
from .errors import DimensionMismatch, FormatError, NotNormalized, StoreFrozen, ZeroNorm

MAGIC = b"SCVD"
VERSION = 1
_HEADER = struct.Struct("<4sBIQ")
_NORM_TOL = 1e-6
_RESCORE_MARGIN = 1e-9


@dataclass(frozen=True)
class SearchHit:
    id: int
    score: float
    entry_ref: str


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise DimensionMismatch(a.dim, b.dim)
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine of a zero vector is undefined")
    dot = math.fsum(x * y for x, y in zip(a.values, b.values))
    return max(-1.0, min(1.0, dot / (na * nb)))


class VectorStore:
    def __init__(self, dim: int | None = None):
        self.dim = dim
        self._refs: list[str] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self.frozen = False

    def __len__(self) -> int:
        return len(self._refs)

    def insert(self, vector: EmbeddingVector, entry_ref: str) -> int:
        if self.frozen:
            raise StoreFrozen("store is read-only")
        if self.dim is None:
            self.dim = vector.dim
        elif vector.dim != self.dim:
            raise DimensionMismatch(self.dim, vector.dim)
        norm = vector.norm()
        if norm == 0.0:
            raise ZeroNorm("refusing to store a zero vector")
        if abs(norm - 1.0) > _NORM_TOL:
            raise NotNormalized(f"vector norm {norm!r} is not 1")
        self._rows.append(np.asarray(vector.values, dtype=np.float64))
        self._refs.append(entry_ref)
        self._matrix = None
        return len(self._refs) - 1

    def freeze(self) -> VectorStore:
        self.frozen = True
        self._ensure_matrix()
        return self

    def entry_ref(self, vector_id: int) -> str:
        return self._refs[vector_id]

    def refs(self) -> list[str]:
        return list(self._refs)

    def vector(self, vector_id: int) -> np.ndarray:
        return self._ensure_matrix()[vector_id]

    def _ensure_matrix(self) -> np.ndarray:
        if self._matrix is None:
            if self._rows:
                self._matrix = np.vstack(self._rows)
            else:
                self._matrix = np.zeros((0, self.dim or 0))
        return self._matrix

    def top_k(
        self,
        query: EmbeddingVector,
        k: int,
        filter: Callable[[str], bool] | None = None,
    ) -> list[SearchHit]:
        """Exact top-k by cosine; ties go to the lower id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self._refs:
            return []
        if query.dim != self.dim:
            raise DimensionMismatch(self.dim, query.dim)
        matrix = self._ensure_matrix()
        ids = np.arange(len(self._refs))
        if filter is not None:
            ids = ids[np.fromiter((filter(r) for r in self._refs), dtype=bool, count=len(self._refs))]
            if ids.size == 0:
                return []
        q = np.asarray(query.values, dtype=np.float64)
        approx = matrix[ids] @ q
        # BLAS summation order varies by platform, so the vectorized scores only
        # pick candidates; the returned ranking uses exactly rounded dot products.
        if ids.size > k:
            cutoff = np.partition(approx, ids.size - k)[ids.size - k] - _RESCORE_MARGIN
            ids = ids[approx >= cutoff]
        rows = matrix[ids] * q
        scores = np.array([min(1.0, max(-1.0, math.fsum(r))) for r in rows])
        order = np.lexsort((ids, -scores))[:k]
        return [SearchHit(int(ids[i]), float(scores[i]), self._refs[ids[i]]) for i in order]

    def to_bytes(self) -> bytes:
        dim = self.dim or 0
        parts = [_HEADER.pack(MAGIC, VERSION, dim, len(self._refs))]
        matrix = self._ensure_matrix()
        for i, ref in enumerate(self._refs):
            raw = ref.encode("utf-8")
            parts.append(struct.pack("<QI", i, len(raw)))
            parts.append(raw)
            parts.append(matrix[i].astype("<f8").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<Q", fnv1a_64(body))

    def save(self, path: str | Path) -> None:
        write_atomic(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> VectorStore:
        if len(data) < _HEADER.size + 8:
            raise FormatError("file too short")
        magic, version, dim, count = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        body, (checksum,) = data[:-8], struct.unpack("<Q", data[-8:])
        if fnv1a_64(body) != checksum:
            raise FormatError("checksum mismatch")
        store = cls(dim if count or dim else None)
        pos = _HEADER.size
        rows = []
        try:
            for expected_id in range(count):
                vid, ref_len = struct.unpack_from("<QI", body, pos)
                pos += 12
                if vid != expected_id:
                    raise FormatError(f"record {expected_id} has id {vid}")
                ref = body[pos : pos + ref_len].decode("utf-8")
                if len(ref.encode("utf-8")) != ref_len:
                    raise FormatError("truncated entry ref")
                pos += ref_len
                end = pos + 8 * dim
                if end > len(body):
                    raise FormatError("truncated vector data")
                rows.append(np.frombuffer(body, dtype="<f8", count=dim, offset=pos).astype(np.float64))
                store._refs.append(ref)
                pos = end
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"corrupt record: {exc}") from exc
        if pos != len(body):
            raise FormatError("trailing bytes after last record")
        store._rows = rows
        return store.freeze()

    @classmethod
    def load(cls, path: str | Path) -> VectorStore:
        return cls.from_bytes(Path(path).read_bytes())


def build(vectors: Iterable[tuple[EmbeddingVector, str]]) -> VectorStore:
    store = VectorStore()
    for vec, ref in vectors:
        store.insert(vec, ref)
    return store.freeze()
