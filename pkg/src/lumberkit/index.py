"""Retrieval substrate: exact cosine top-k over embeddings and Okapi BM25."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backends import BackendError, EmbeddingBackend, EmbeddingCache
from .chunker import Chunk
from .errors import LumberkitError

BM25_K1 = 1.2
BM25_B = 0.75

Tokenizer = Callable[[str], list[str]]


class IndexingError(LumberkitError):
    """Problem building or querying a retrieval index."""


@dataclass(frozen=True)
class VectorIndex:
    """Chunks with their embedding matrix, row i belonging to chunks[i]."""

    chunks: tuple[Chunk, ...]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be 2-D, got shape {self.vectors.shape}")
        if len(self.chunks) != self.vectors.shape[0]:
            raise ValueError(
                f"{len(self.chunks)} chunks but {self.vectors.shape[0]} vectors"
            )
        if not self.chunks:
            raise ValueError("a vector index needs at least one chunk")

    def __len__(self) -> int:
        return len(self.chunks)

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])


def embed_chunks(
    chunks: Sequence[Chunk],
    backend: EmbeddingBackend,
    cache: EmbeddingCache | None = None,
    *,
    batch_size: int = 64,
) -> VectorIndex:
    """Embed chunk texts into a vector index, consulting the cache first.

    Texts already in the cache cost no backend call; fresh embeddings are
    written back. A backend failure aborts naming the failed batch.
    """
    if not chunks:
        raise IndexingError("no chunks to index")
    texts = [chunk.text for chunk in chunks]
    vectors: list[np.ndarray | None] = [
        cache.get(text) if cache is not None else None for text in texts
    ]
    misses = [i for i, vector in enumerate(vectors) if vector is None]
    for begin in range(0, len(misses), batch_size):
        batch = misses[begin : begin + batch_size]
        try:
            rows = backend.embed([texts[i] for i in batch])
        except BackendError as exc:
            raise IndexingError(
                f"embedding failed for chunk batch {batch[0]}..{batch[-1]}: {exc}"
            ) from exc
        for row, i in zip(rows, batch):
            vectors[i] = row
            if cache is not None:
                cache.put(texts[i], row)
    matrix = np.vstack([np.asarray(v, dtype=np.float64) for v in vectors])
    return VectorIndex(tuple(chunks), matrix)


def cosine_topk(
    index: VectorIndex, query_vector: np.ndarray, k: int
) -> list[tuple[Chunk, float]]:
    """Exact top-k by cosine similarity; ties break by ascending chunk_id.

    Brute force over every row; k larger than the index returns everything.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.dimension:
        raise IndexingError(
            f"query dimension {query.shape[0]} != index dimension {index.dimension}"
        )
    query_norm = float(np.linalg.norm(query))
    row_norms = np.linalg.norm(index.vectors, axis=1)
    dots = index.vectors @ query
    denominators = row_norms * query_norm
    safe = denominators > 0.0
    scores = np.where(safe, dots / np.where(safe, denominators, 1.0), 0.0)
    order = sorted(
        range(len(index)), key=lambda i: (-scores[i], index.chunks[i].chunk_id)
    )
    return [(index.chunks[i], float(scores[i])) for i in order[:k]]


_TOKEN_RE = re.compile(r"[^\W_]+")


def bm25_tokenize(text: str) -> list[str]:
    """Analyzer: lowercase, split on non-alphanumerics, drop empty tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Index:
    """Okapi BM25 statistics over a chunk list."""

    chunks: tuple[Chunk, ...]
    k1: float
    b: float
    tokenizer: Tokenizer
    term_frequencies: tuple[Counter, ...]
    document_frequency: dict[str, int] = field(repr=False, default_factory=dict)
    lengths: tuple[int, ...] = ()
    average_length: float = 0.0

    def __len__(self) -> int:
        return len(self.chunks)


def bm25_build(
    chunks: Sequence[Chunk],
    tokenizer: Tokenizer | None = None,
    *,
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> Bm25Index:
    """Build a BM25 index over chunk texts with the given analyzer."""
    if not chunks:
        raise IndexingError("no chunks to index")
    tokenizer = tokenizer or bm25_tokenize
    term_frequencies: list[Counter] = []
    document_frequency: dict[str, int] = {}
    lengths: list[int] = []
    for chunk in chunks:
        tokens = tokenizer(chunk.text)
        counts = Counter(tokens)
        term_frequencies.append(counts)
        lengths.append(len(tokens))
        for term in counts:
            document_frequency[term] = document_frequency.get(term, 0) + 1
    average_length = sum(lengths) / len(lengths)
    return Bm25Index(
        chunks=tuple(chunks),
        k1=k1,
        b=b,
        tokenizer=tokenizer,
        term_frequencies=tuple(term_frequencies),
        document_frequency=document_frequency,
        lengths=tuple(lengths),
        average_length=average_length,
    )


def bm25_scores(index: Bm25Index, query: str) -> np.ndarray:
    """Score every chunk against the query.

    idf(t) = log(1 + (N - df + 0.5) / (df + 0.5)), which is strictly positive,
    so a chunk scores exactly 0 iff it shares no term with the query. Each
    query token occurrence contributes separately.
    """
    n = len(index)
    scores = np.zeros(n, dtype=np.float64)
    average_length = index.average_length if index.average_length > 0.0 else 1.0
    for token in index.tokenizer(query):
        df = index.document_frequency.get(token, 0)
        if df == 0:
            continue
        idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for i in range(n):
            tf = index.term_frequencies[i].get(token, 0)
            if tf == 0:
                continue
            length_norm = 1.0 - index.b + index.b * index.lengths[i] / average_length
            scores[i] += idf * tf * (index.k1 + 1.0) / (tf + index.k1 * length_norm)
    return scores


def bm25_topk(index: Bm25Index, query: str, k: int) -> list[tuple[Chunk, float]]:
    """Top-k chunks by BM25 score; ties break by ascending chunk_id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = bm25_scores(index, query)
    order = sorted(
        range(len(index)), key=lambda i: (-scores[i], index.chunks[i].chunk_id)
    )
    return [(index.chunks[i], float(scores[i])) for i in order[:k]]
