"""Per-(document, expansion unit) attribution gains, query-local routing weights
and capacity-bounded expansion memories."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .index import BM25Index, DocumentKey, canonical_text, stable_id
from .similarity import NormBound, SimilarityKind, augment_key, clip_to_norm, similarity, tokenize
from .validation import check_positive_int, check_vector


@dataclass(frozen=True, eq=False)
class ExpansionUnit:
    unit_id: str
    text: str
    vector: np.ndarray

    def __repr__(self) -> str:
        return f"ExpansionUnit({self.unit_id}, {self.text[:30]!r})"


def make_unit(text: str, vector, bound=NormBound(1.0)) -> ExpansionUnit:
    """Admit an expansion unit: id from its canonical text, vector clipped to ``bound``."""
    if not canonical_text(text):
        raise ValueError("expansion unit text is empty")
    vec = clip_to_norm(vector, bound)
    vec.setflags(write=False)
    return ExpansionUnit(stable_id(text), text, vec)


@dataclass(frozen=True)
class AttributionRecord:
    doc_id: str
    unit: ExpansionUnit
    delta: float
    weight: float
    query_id: str = ""

    @property
    def unit_id(self) -> str:
        return self.unit.unit_id

    @property
    def gated(self) -> bool:
        return gate(self.delta)

    @property
    def increment(self) -> float:
        return self.weight * self.delta if self.gated else 0.0


def _key_vector(key) -> np.ndarray:
    return key.vector if isinstance(key, DocumentKey) else key


def _unit_vector(unit) -> np.ndarray:
    return unit.vector if isinstance(unit, ExpansionUnit) else unit


def attribution_gain(query_vec, key, unit, kind=SimilarityKind.INNER_PRODUCT) -> float:
    """``sim(q, k (+) e) - sim(q, k)``: the gain of appending ``unit`` to ``key``,
    measured against the original query."""
    k = _key_vector(key)
    e = _unit_vector(unit)
    return similarity(query_vec, augment_key(k, e), kind) - similarity(query_vec, k, kind)


def attribution_matrix(query_vec, key_matrix, unit_matrix, kind=SimilarityKind.INNER_PRODUCT) -> np.ndarray:
    """Vectorized :func:`attribution_gain` for every (key row, unit row) pair."""
    q = check_vector(query_vec, name="query vector")
    K = np.atleast_2d(np.asarray(key_matrix, dtype=np.float64))
    E = np.atleast_2d(np.asarray(unit_matrix, dtype=np.float64))
    if K.shape[1] != q.shape[0] or E.shape[1] != q.shape[0]:
        raise ValueError("dimension mismatch in attribution")
    augmented = K[:, None, :] + E[None, :, :]
    after = augmented @ q
    before = K @ q
    if SimilarityKind.parse(kind) is SimilarityKind.COSINE:
        qn = np.linalg.norm(q)
        an = np.linalg.norm(augmented, axis=2)
        kn = np.linalg.norm(K, axis=1)
        if qn == 0 or np.any(an == 0) or np.any(kn == 0):
            raise ValueError("cosine similarity is undefined for a zero-norm operand")
        after = np.clip(after / (an * qn), -1.0, 1.0)
        before = np.clip(before / (kn * qn), -1.0, 1.0)
    return after - before[:, None]


def sparse_attribution_gain(bm25: BM25Index, query_text: str, doc_index: int, unit: ExpansionUnit,
                            k1: float = 1.2, b: float = 0.75) -> float:
    q_tokens = tokenize(query_text)
    return (bm25.doc_score(q_tokens, doc_index, tokenize(unit.text), k1, b)
            - bm25.doc_score(q_tokens, doc_index, (), k1, b))


def gate(delta: float) -> bool:
    return delta > 0.0


def softmax_weights(deltas: Sequence[float]) -> list[float]:
    arr = np.asarray(deltas, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("softmax needs a non-empty list of gains")
    if not np.all(np.isfinite(arr)):
        raise ValueError("softmax gains must be finite")
    z = np.exp(arr - arr.max())
    return (z / z.sum()).tolist()


def attribution_records(query_id: str, doc_ids: Sequence[str], units: Sequence[ExpansionUnit],
                        deltas: np.ndarray) -> list[AttributionRecord]:
    """Turn a ``len(doc_ids) x len(units)`` gain matrix into weighted records.

    Weights are a softmax over all units of the query for each document; the gate
    is applied later, inside the score increment.
    """
    records = []
    for i, doc_id in enumerate(doc_ids):
        row = [float(d) for d in deltas[i]]
        for unit, delta, w in zip(units, row, softmax_weights(row)):
            records.append(AttributionRecord(doc_id, unit, delta, w, query_id))
    return records


@dataclass
class MemoryEntry:
    unit: ExpansionUnit
    score: float
    merged: bool = False
    sources: set[str] = field(default_factory=set)


class ExpansionMemory:
    """Per-document store of expansion units and their accumulated relevance scores."""

    def __init__(self, doc_id: str, capacity: int = 32):
        self.doc_id = doc_id
        self.capacity = check_positive_int(capacity, "capacity")
        self.entries: dict[str, MemoryEntry] = {}
        # ids merged into the key; outlives eviction of the entry itself
        self.merged_ids: set[str] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, unit_id: str) -> bool:
        return unit_id in self.entries

    def score(self, unit_id: str) -> float:
        entry = self.entries.get(unit_id)
        return entry.score if entry else 0.0

    def mark_merged(self, unit_ids: Iterable[str]) -> None:
        for uid in unit_ids:
            self.merged_ids.add(uid)
            if uid in self.entries:
                self.entries[uid].merged = True

    def _evict(self) -> None:
        while len(self.entries) > self.capacity:
            pool = [e for e in self.entries.values() if not e.merged] or list(self.entries.values())
            low = min(e.score for e in pool)
            victim = max(e.unit.unit_id for e in pool if e.score == low)
            del self.entries[victim]

    def copy(self) -> "ExpansionMemory":
        new = ExpansionMemory(self.doc_id, self.capacity)
        new.entries = {k: MemoryEntry(e.unit, e.score, e.merged, set(e.sources)) for k, e in self.entries.items()}
        new.merged_ids = set(self.merged_ids)
        return new

    def __repr__(self) -> str:
        return f"ExpansionMemory({self.doc_id!r}, {len(self)}/{self.capacity})"


def accumulate(memory: ExpansionMemory, records: Iterable[AttributionRecord]) -> ExpansionMemory:
    """Add each record's gated, weighted gain to its unit's score, then evict the
    lowest-scoring unmerged entries beyond capacity. Mutates and returns ``memory``."""
    increments: dict[str, float] = {}
    units: dict[str, ExpansionUnit] = {}
    sources: dict[str, set[str]] = {}
    for rec in records:
        if rec.doc_id != memory.doc_id:
            raise ValueError(f"record for {rec.doc_id!r} routed to memory of {memory.doc_id!r}")
        inc = rec.increment
        if not inc > 0.0:
            continue
        increments[rec.unit_id] = increments.get(rec.unit_id, 0.0) + inc
        units.setdefault(rec.unit_id, rec.unit)
        sources.setdefault(rec.unit_id, set()).add(rec.query_id)
    for uid in sorted(increments):
        entry = memory.entries.get(uid)
        if entry is None:
            entry = memory.entries[uid] = MemoryEntry(units[uid], 0.0, uid in memory.merged_ids)
        entry.score += increments[uid]
        entry.sources |= sources[uid]
    memory._evict()
    return memory


def ranked_entries(memory: ExpansionMemory, x: int) -> list[MemoryEntry]:
    live = [e for e in memory.entries.values() if e.score > 0.0]
    live.sort(key=lambda e: (-e.score, e.unit.unit_id))
    return live[:x]


def top_x(memory: ExpansionMemory, x: int) -> list[ExpansionUnit]:
    """Units that are among the ``x`` highest-scoring entries and not yet merged.

    Already-merged units keep their slot in the ranking, so once the top-x set
    stabilizes and has been merged this returns ``[]``.
    """
    x = check_positive_int(x, "x")
    return [e.unit for e in ranked_entries(memory, x) if not e.merged]

