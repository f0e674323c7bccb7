"""Document keys, immutable key-store snapshots and exact top-N retrieval."""

from __future__ import annotations

import enum
import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .similarity import SimilarityKind, tokenize
from .validation import check_matrix, check_positive_int, check_vector


def canonical_text(text: str) -> str:
    return " ".join(text.lower().split())


def stable_id(text: str) -> str:
    """Stable 16-hex-digit id of the canonicalized text."""
    return hashlib.sha1(canonical_text(text).encode("utf-8")).hexdigest()[:16]


class KeyStrategy(str, enum.Enum):
    FULL_TEXT = "full_text"
    TITLE = "title"
    ABSTRACT = "abstract"
    KEYWORDS = "keywords"

    @classmethod
    def parse(cls, value) -> "KeyStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown key strategy {value!r}") from None


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: str | None = None
    abstract: str | None = None
    keywords: tuple[str, ...] | None = None

    def field_text(self, strategy: KeyStrategy) -> str | None:
        strategy = KeyStrategy.parse(strategy)
        if strategy is KeyStrategy.FULL_TEXT:
            value = self.text
        elif strategy is KeyStrategy.TITLE:
            value = self.title
        elif strategy is KeyStrategy.ABSTRACT:
            value = self.abstract
        else:
            value = " ".join(self.keywords) if self.keywords else None
        if value is None or not value.strip():
            return None
        return value


@dataclass(frozen=True, eq=False)
class QueryRecord:
    query_id: str
    text: str
    vector: np.ndarray | None = None
    gold_doc_ids: frozenset[str] = frozenset()
    answer: str | None = None
    intent_key: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "gold_doc_ids", frozenset(self.gold_doc_ids))
        object.__setattr__(self, "intent_key", stable_id(self.text))
        if self.vector is not None:
            vec = check_vector(self.vector, name=f"query {self.query_id}")
            vec.setflags(write=False)
            object.__setattr__(self, "vector", vec)

    def with_vector(self, vector) -> "QueryRecord":
        return QueryRecord(self.query_id, self.text, vector, self.gold_doc_ids, self.answer)


@dataclass(frozen=True, eq=False)
class DocumentKey:
    doc_id: str
    vector: np.ndarray
    sparse_text: str
    merged_unit_ids: frozenset[str] = frozenset()
    version: int = 0


@dataclass(frozen=True)
class RankedList:
    """Descending-score ``(doc_id, score)`` pairs."""

    entries: tuple[tuple[str, float], ...]

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def top(self, k: int) -> list[str]:
        return [d for d, _ in self.entries[:k]]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, float]]:
        return iter(self.entries)


class BM25Index:
    """Okapi BM25 over whitespace/lowercase tokens of each key's sparse text.

    ``idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`` -- the non-negative form, so a
    term present in every document still contributes.
    """

    def __init__(self, texts: Sequence[str]):
        self.n_docs = len(texts)
        self.doc_tf: list[Counter] = [Counter(tokenize(t)) for t in texts]
        self.doc_len = np.array([sum(tf.values()) for tf in self.doc_tf], dtype=np.float64)
        self.avgdl = float(self.doc_len.mean()) if self.n_docs else 0.0
        postings: dict[str, list[tuple[int, int]]] = {}
        for i, tf in enumerate(self.doc_tf):
            for term, count in tf.items():
                postings.setdefault(term, []).append((i, count))
        self.postings = {
            t: (np.array([p[0] for p in ps]), np.array([p[1] for p in ps], dtype=np.float64))
            for t, ps in postings.items()
        }

    def idf(self, term: str) -> float:
        df = len(self.postings[term][0]) if term in self.postings else 0
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def scores(self, query_tokens: Sequence[str], k1: float = 1.2, b: float = 0.75) -> np.ndarray:
        out = np.zeros(self.n_docs)
        avgdl = self.avgdl or 1.0
        for term in query_tokens:
            hit = self.postings.get(term)
            if hit is None:
                continue
            idx, tf = hit
            norm = k1 * (1.0 - b + b * self.doc_len[idx] / avgdl)
            out[idx] += self.idf(term) * tf * (k1 + 1.0) / (tf + norm)
        return out

    def doc_score(self, query_tokens: Sequence[str], doc_index: int, extra_tokens: Sequence[str] = (),
                  k1: float = 1.2, b: float = 0.75) -> float:
        """Score one document, optionally with ``extra_tokens`` appended to it.

        Corpus statistics (df, avgdl) are held at their current values.
        """
        tf = self.doc_tf[doc_index]
        if extra_tokens:
            tf = tf + Counter(extra_tokens)
        dl = self.doc_len[doc_index] + len(extra_tokens)
        avgdl = self.avgdl or 1.0
        total = 0.0
        for term in query_tokens:
            f = tf.get(term, 0)
            if f == 0:
                continue
            total += self.idf(term) * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * dl / avgdl))
        return total


@dataclass(frozen=True, eq=False)
class KeyStore:
    """Immutable snapshot of every document key.

    Evolution never mutates a snapshot; it builds a new one, so readers holding a
    reference always see a consistent index.
    """

    doc_ids: tuple[str, ...]
    matrix: np.ndarray
    sparse_texts: tuple[str, ...]
    merged: tuple[frozenset[str], ...]
    versions: tuple[int, ...]
    epoch: int = 0

    def __post_init__(self):
        n = len(self.doc_ids)
        if n == 0:
            raise ValueError("key store is empty")
        if len(set(self.doc_ids)) != n:
            raise IngestionError("duplicate doc_id in key store")
        matrix = check_matrix(self.matrix, name="key matrix")
        if matrix.shape[0] != n or not (len(self.sparse_texts) == len(self.merged) == len(self.versions) == n):
            raise ValueError("key store columns have inconsistent lengths")
        matrix = np.array(matrix, dtype=np.float64, order="C", copy=True)
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @cached_property
    def position(self) -> dict[str, int]:
        return {d: i for i, d in enumerate(self.doc_ids)}

    @cached_property
    def tiebreak(self) -> np.ndarray:
        order = sorted(range(len(self.doc_ids)), key=self.doc_ids.__getitem__)
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        return rank

    @cached_property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.matrix, axis=1)

    @cached_property
    def bm25(self) -> BM25Index:
        return BM25Index(self.sparse_texts)

    def key(self, doc_id: str) -> DocumentKey:
        i = self.position[doc_id]
        return DocumentKey(doc_id, self.matrix[i], self.sparse_texts[i], self.merged[i], self.versions[i])

    def keys(self) -> Iterator[DocumentKey]:
        for d in self.doc_ids:
            yield self.key(d)

    def with_updates(self, updates: Mapping[str, tuple[np.ndarray, str, frozenset[str]]]) -> "KeyStore":
        """New snapshot where each updated doc gets a new key and ``version + 1``."""
        if not updates:
            return self
        matrix = self.matrix.copy()
        sparse = list(self.sparse_texts)
        merged = list(self.merged)
        versions = list(self.versions)
        for doc_id, (vector, text, ids) in updates.items():
            i = self.position[doc_id]
            matrix[i] = check_vector(vector, name=f"key {doc_id}", dim=self.dim)
            sparse[i] = text
            if not ids >= merged[i]:
                raise ValueError(f"merged units of {doc_id} may only grow")
            merged[i] = frozenset(ids)
            versions[i] += 1
        return KeyStore(self.doc_ids, matrix, tuple(sparse), tuple(merged), tuple(versions), self.epoch + 1)

    def same_keys(self, other: "KeyStore") -> bool:
        return (self.doc_ids == other.doc_ids and np.array_equal(self.matrix, other.matrix)
                and self.sparse_texts == other.sparse_texts)


Embedder = Callable[[str], np.ndarray]


def build_index(docs: Iterable[Document], strategy=KeyStrategy.FULL_TEXT, embed: Embedder | None = None) -> KeyStore:
    docs = list(docs)
    if not docs:
        raise IngestionError("corpus is empty")
    strategy = KeyStrategy.parse(strategy)
    seen: set[str] = set()
    texts = []
    for doc in docs:
        if doc.doc_id in seen:
            raise IngestionError(f"duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        text = doc.field_text(strategy)
        if text is None:
            raise IngestionError(f"document {doc.doc_id!r} has no {strategy.value} field")
        texts.append(text)
    if embed is None:
        from .similarity import MockEmbedder
        embed = MockEmbedder()
    matrix = np.vstack([check_vector(embed(t), name=f"embedding of {d.doc_id}") for t, d in zip(texts, docs)])
    n = len(docs)
    return KeyStore(
        doc_ids=tuple(d.doc_id for d in docs),
        matrix=matrix,
        sparse_texts=tuple(texts),
        merged=tuple(frozenset() for _ in range(n)),
        versions=(0,) * n,
    )


def _rank(store: KeyStore, scores: np.ndarray, n: int) -> RankedList:
    # primary: descending score; secondary: ascending doc_id
    order = np.lexsort((store.tiebreak, -scores))[:n]
    ids = store.doc_ids
    return RankedList(tuple((ids[i], float(scores[i])) for i in order))


def dense_scores(store: KeyStore, query_vec, kind=SimilarityKind.INNER_PRODUCT) -> np.ndarray:
    q = check_vector(query_vec, name="query vector", dim=store.dim)
    scores = store.matrix @ q
    if SimilarityKind.parse(kind) is SimilarityKind.COSINE:
        qn = float(np.linalg.norm(q))
        if qn == 0.0 or np.any(store.norms == 0.0):
            raise ValueError("cosine similarity is undefined for a zero-norm operand")
        scores = np.clip(scores / (store.norms * qn), -1.0, 1.0)
    return scores


def retrieve_top_n(store: KeyStore, query_vec, n: int, kind=SimilarityKind.INNER_PRODUCT) -> RankedList:
    if store is None or len(store) == 0:
        raise ValueError("cannot retrieve from an empty store")
    n = check_positive_int(n, "n")
    return _rank(store, dense_scores(store, query_vec, kind), n)


def bm25_retrieve(store: KeyStore, query_text: str, n: int, k1: float = 1.2, b: float = 0.75) -> RankedList:
    n = check_positive_int(n, "n")
    tokens = tokenize(query_text or "")
    if not tokens:
        raise ValueError("query is empty after tokenization")
    return _rank(store, store.bm25.scores(tokens, k1, b), n)
