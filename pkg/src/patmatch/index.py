"""Exact dense retrieval: dot-product scoring with deterministic top-k.

Semantics are defined by the full-scan oracle: score every document, drop
exclusions, sort by (-score, doc_id), truncate to k. Two interchangeable
kernels implement it; the compiled extension is preferred when built,
otherwise the chunked numpy scan is used. Query-time results never depend
on which kernel ran.

On disk an index is a directory holding ``manifest.json`` (fingerprint,
doc ids, dimensions) plus ``vectors.f32``: row-major little-endian 32-bit
floats, ``count * dim`` of them, row i belonging to ``doc_ids[i]``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import CorpusStore
from .embedder import EmbeddingBackend

logger = logging.getLogger(__name__)

try:
    from . import _scan

    _HAVE_EXT = True
except ImportError:  # pragma: no cover - depends on build environment
    _scan = None
    _HAVE_EXT = False

DEFAULT_KERNEL = "ext" if _HAVE_EXT else "numpy"


def available_kernels() -> tuple[str, ...]:
    return ("ext", "numpy") if _HAVE_EXT else ("numpy",)


class FingerprintMismatch(ValueError):
    """Query vector provenance does not match the index."""


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: str
    score: float
    rank: int


class VectorIndex:
    """Immutable store of document vectors with a provenance fingerprint."""

    def __init__(self, doc_ids: Sequence[str], matrix: np.ndarray, fingerprint: str):
        doc_ids = tuple(doc_ids)
        if len(set(doc_ids)) != len(doc_ids):
            raise ValueError("doc_ids must be unique")
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if not matrix.flags.writeable:  # frombuffer gives read-only views
            matrix = matrix.copy()
        if matrix.ndim != 2 or matrix.shape[0] != len(doc_ids):
            raise ValueError(
                f"matrix shape {matrix.shape} does not match {len(doc_ids)} doc ids"
            )
        self.doc_ids = doc_ids
        self.matrix = matrix
        self.fingerprint = fingerprint
        self._row_of = {doc_id: i for i, doc_id in enumerate(doc_ids)}
        # Tie-breaks are by ascending doc_id; precompute each row's rank in
        # lexicographic id order so kernels compare integers, not strings.
        order = sorted(range(len(doc_ids)), key=lambda i: doc_ids[i])
        lex = np.empty(len(doc_ids), dtype=np.int64)
        for rank, row in enumerate(order):
            lex[row] = rank
        self._lex_rank = lex

    @property
    def count(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def score(u: np.ndarray, v: np.ndarray) -> float:
    """Dot-product relevance score between two vectors of equal dimension."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    result = float(np.dot(u, v))
    if not np.isfinite(result):
        raise ValueError("score is not finite")
    return result


def build_index(corpus: CorpusStore, backend: EmbeddingBackend) -> VectorIndex:
    """Embed every document abstract, in corpus iteration order."""
    if corpus.count == 0:
        raise ValueError("empty corpus")
    doc_ids = [doc.id for doc in corpus]
    texts = [doc.abstract for doc in corpus]
    vectors = backend.embed_batch(texts)
    return VectorIndex(doc_ids, vectors.astype(np.float32), backend.fingerprint)


def save_index(index: VectorIndex, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "fingerprint": index.fingerprint,
        "count": index.count,
        "dim": index.dim,
        "dtype": "<f4",
        "layout": "row-major",
        "doc_ids": list(index.doc_ids),
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, indent=2), encoding="utf-8"
    )
    little = index.matrix.astype("<f4", copy=False)
    (directory / "vectors.f32").write_bytes(little.tobytes(order="C"))


def load_index(directory: str | Path) -> VectorIndex:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    raw = (directory / "vectors.f32").read_bytes()
    matrix = np.frombuffer(raw, dtype="<f4").reshape(manifest["count"], manifest["dim"])
    return VectorIndex(manifest["doc_ids"], matrix, manifest["fingerprint"])


def top_k(
    index: VectorIndex,
    query: np.ndarray,
    k: int,
    exclusions: Iterable[str] = (),
    *,
    fingerprint: str | None = None,
    kernel: str | None = None,
) -> list[ScoredDoc]:
    """Top-k docs by descending score, ties broken by ascending doc_id.

    Returns min(k, available) results after dropping ``exclusions``. When
    ``fingerprint`` is given it must equal the index fingerprint.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if fingerprint is not None and fingerprint != index.fingerprint:
        raise FingerprintMismatch(
            f"query fingerprint {fingerprint!r} != index fingerprint {index.fingerprint!r}"
        )
    query = np.ascontiguousarray(query, dtype=np.float64)
    if query.ndim != 1 or query.shape[0] != index.dim:
        raise ValueError(f"query dim {query.shape} does not match index dim {index.dim}")

    excluded = np.zeros(index.count, dtype=np.uint8)
    for doc_id in exclusions:
        row = index._row_of.get(doc_id)
        if row is not None:
            excluded[row] = 1

    kernel = kernel or DEFAULT_KERNEL
    if kernel == "ext":
        if not _HAVE_EXT:
            raise ValueError("compiled kernel is not available")
        rows, scores = _scan.topk_dot(index.matrix, index._lex_rank, query, k, excluded)
        rows = np.asarray(rows)
        scores = np.asarray(scores)
    elif kernel == "numpy":
        rows, scores = _topk_numpy(index.matrix, index._lex_rank, query, k, excluded)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")

    order = np.lexsort((index._lex_rank[rows], -scores))
    return [
        ScoredDoc(doc_id=index.doc_ids[rows[i]], score=float(scores[i]), rank=rank)
        for rank, i in enumerate(order, start=1)
    ]


def _topk_numpy(
    matrix: np.ndarray, lex_rank: np.ndarray, query: np.ndarray, k: int, excluded: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Chunked full scan in float64, then one lexsort over the survivors."""
    n = matrix.shape[0]
    scores = np.empty(n, dtype=np.float64)
    step = 65536  # bounds the float64 upcast copy
    for start in range(0, n, step):
        scores[start : start + step] = matrix[start : start + step].astype(np.float64) @ query
    valid = np.flatnonzero(excluded == 0)
    order = np.lexsort((lex_rank[valid], -scores[valid]))
    take = valid[order[:k]]
    return take, scores[take]
