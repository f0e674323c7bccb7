"""Batched, saturation-triggered evolution of document keys.

The engine owns the mutable adaptation state (open batch, expansion memories,
branch-gain tracker) and publishes immutable :class:`~erm.index.KeyStore`
snapshots. Attribution always runs against the snapshot current at the time the
query is processed; evolution swaps in a new snapshot under a writer lock.
"""

from __future__ import annotations

import enum
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .attribution import (
    AttributionRecord,
    ExpansionMemory,
    ExpansionUnit,
    accumulate,
    attribution_matrix,
    attribution_records,
    sparse_attribution_gain,
    top_x,
)
from .index import KeyStore, QueryRecord, RankedList, bm25_retrieve, retrieve_top_n
from .similarity import NormBound, SimilarityKind, augment_key_many, clip_to_norm
from .validation import check_fraction, check_positive_int
from .verifier import (
    RetrievalVerdictConfig,
    SuccessRecord,
    call_generation_provider,
    success,
    verify_retrieval,
)

logger = logging.getLogger(__name__)

NO_GAIN = -math.inf


class Mode(str, enum.Enum):
    OFFLINE = "offline"
    ONLINE = "online"


class Backend(str, enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"


class ConcurrentWriterError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvolutionConfig:
    x: int = 3
    batch_capacity: int = 16
    memory_capacity: int = 32
    norm_bound: float = 1.0
    mode: Mode = Mode.OFFLINE
    patience: int = 3
    rho: float = 0.1
    # only this many top-ranked documents receive attribution
    attribution_depth: int = 1
    bm25_k1: float = 1.2
    bm25_b: float = 0.75

    def __post_init__(self):
        for name in ("x", "batch_capacity", "memory_capacity", "patience", "attribution_depth"):
            check_positive_int(getattr(self, name), name)
        if self.x > self.memory_capacity:
            raise ValueError(f"x={self.x} exceeds memory_capacity={self.memory_capacity}")
        object.__setattr__(self, "norm_bound", NormBound(self.norm_bound))
        object.__setattr__(self, "mode", Mode(self.mode))
        check_fraction(self.rho, "rho", 0.0, 1.0, closed_low=False, closed_high=False)


@dataclass
class BatchRecord:
    query: QueryRecord
    units: list[ExpansionUnit]
    ranking: RankedList
    attributions: list[AttributionRecord]


@dataclass
class AdaptationBatch:
    records: list[BatchRecord] = field(default_factory=list)
    opened_at: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def clear(self, epoch: int) -> None:
        self.records = []
        self.opened_at = epoch


@dataclass
class BranchGainTracker:
    patience_limit: int = 3
    margin: float = 0.1
    best_gain: float = NO_GAIN
    history: list[float] = field(default_factory=list)
    patience_used: int = 0

    def fresh(self) -> "BranchGainTracker":
        return BranchGainTracker(self.patience_limit, self.margin)


def branch_gain(batch: AdaptationBatch | Sequence[BatchRecord]) -> float:
    """Largest raw attribution gain over every record and (doc, unit) pair."""
    records = batch.records if isinstance(batch, AdaptationBatch) else batch
    gains = [a.delta for rec in records for a in rec.attributions]
    return max(gains) if gains else NO_GAIN


def saturation_check(tracker: BranchGainTracker, new_gain: float) -> bool:
    """Patience rule: saturated once ``P`` consecutive gains fail to beat
    ``(1 - rho) * best``. Updates ``tracker`` in place."""
    if tracker.best_gain == NO_GAIN:
        tracker.patience_used = 0
    elif new_gain <= (1.0 - tracker.margin) * tracker.best_gain:
        tracker.patience_used = min(tracker.patience_used + 1, tracker.patience_limit)
    else:
        tracker.patience_used = 0
    tracker.history.append(new_gain)
    tracker.best_gain = max(tracker.best_gain, new_gain)
    return tracker.patience_used >= tracker.patience_limit


@dataclass(frozen=True)
class StepEvent:
    step: int
    doc_id: str
    version_before: int
    version_after: int
    displacement: float
    unit_ids: tuple[str, ...]


def evolve_keys(store: KeyStore, memories: Mapping[str, ExpansionMemory],
                cfg: EvolutionConfig) -> tuple[KeyStore, list[StepEvent]]:
    """One batched step ``k <- k (+) f(top_x(u))`` for every doc with pending units.

    Selected entries are marked merged in ``memories``. Returns the new snapshot
    (``store`` itself when nothing changed) and one event per updated key.
    """
    updates = {}
    selections = {}
    for doc_id in store.doc_ids:
        memory = memories.get(doc_id)
        if memory is None:
            continue
        key = store.key(doc_id)
        chosen = [u for u in top_x(memory, cfg.x) if u.unit_id not in key.merged_unit_ids]
        if not chosen:
            continue
        vecs = [clip_to_norm(u.vector, cfg.norm_bound) for u in chosen]
        vector = augment_key_many(key.vector, vecs)
        text = " ".join([key.sparse_text] + [u.text for u in chosen])
        updates[doc_id] = (vector, text, key.merged_unit_ids | {u.unit_id for u in chosen})
        selections[doc_id] = chosen
    if not updates:
        return store, []
    new_store = store.with_updates(updates)
    events = []
    for doc_id, chosen in selections.items():
        memories[doc_id].mark_merged(u.unit_id for u in chosen)
        i = store.position[doc_id]
        events.append(StepEvent(
            step=new_store.epoch,
            doc_id=doc_id,
            version_before=store.versions[i],
            version_after=new_store.versions[i],
            displacement=float(np.linalg.norm(new_store.matrix[i] - store.matrix[i])),
            unit_ids=tuple(u.unit_id for u in chosen),
        ))
    return new_store, events


def query_after_evolution(store: KeyStore, query: QueryRecord, n: int, kind=SimilarityKind.INNER_PRODUCT,
                          backend=Backend.DENSE, k1: float = 1.2, b: float = 0.75) -> RankedList:
    """Plain retrieval against the (possibly evolved) keys; no expansion on this path."""
    if Backend(backend) is Backend.SPARSE:
        return bm25_retrieve(store, query.text, n, k1, b)
    return retrieve_top_n(store, query.vector, n, kind)


class EvolutionEngine:
    """Single-writer adaptation state for one index."""

    def __init__(self, store: KeyStore, cfg: EvolutionConfig = EvolutionConfig(),
                 kind=SimilarityKind.INNER_PRODUCT, backend=Backend.DENSE,
                 verdict_cfg: RetrievalVerdictConfig = RetrievalVerdictConfig(),
                 generation_provider=None, doc_texts: Mapping[str, str] | None = None,
                 context_size: int = 3):
        self.base_store = store
        self.store = store
        self.cfg = cfg
        self.kind = SimilarityKind.parse(kind)
        self.backend = Backend(backend)
        self.verdict_cfg = verdict_cfg
        self.generation_provider = generation_provider
        self.doc_texts = doc_texts
        self.context_size = context_size
        self.memories: dict[str, ExpansionMemory] = {}
        self.batch = AdaptationBatch()
        self.tracker = BranchGainTracker(cfg.patience, cfg.rho)
        self.trace: list[StepEvent] = []
        self.success_log: list[SuccessRecord] = []
        self.contributors: set[str] = set()
        self.rounds = 0
        self.evolution_steps = 0
        self._writer = threading.Lock()
        self._batch_lock = threading.RLock()

    # -- reads -------------------------------------------------------------
    def memory(self, doc_id: str) -> ExpansionMemory:
        mem = self.memories.get(doc_id)
        if mem is None:
            mem = self.memories[doc_id] = ExpansionMemory(doc_id, self.cfg.memory_capacity)
        return mem

    def expanded_ranking(self, query: QueryRecord, units: Sequence[ExpansionUnit],
                         store: KeyStore | None = None) -> RankedList:
        store = store or self.store
        depth = max(self.cfg.attribution_depth, self.verdict_cfg.k)
        if self.backend is Backend.SPARSE:
            text = " ".join([query.text] + [u.text for u in units])
            return bm25_retrieve(store, text, depth, self.cfg.bm25_k1, self.cfg.bm25_b)
        qv = augment_key_many(query.vector, [u.vector for u in units])
        return retrieve_top_n(store, qv, depth, self.kind)

    def retrieve(self, query: QueryRecord, n: int = 10, frozen: bool = False) -> RankedList:
        store = self.base_store if frozen else self.store
        return query_after_evolution(store, query, n, self.kind, self.backend, self.cfg.bm25_k1, self.cfg.bm25_b)

    # -- adaptation --------------------------------------------------------
    def observe(self, query: QueryRecord, units: Sequence[ExpansionUnit]) -> SuccessRecord | None:
        """Verify ``query`` under its expansion and, if it succeeds, feed it to attribution.

        Returns ``None`` when neither verifier can judge the query (it is then
        never cached).
        """
        units = list(units)
        if not units:
            return None
        store = self.store
        ranking = self.expanded_ranking(query, units, store)
        vr = verify_retrieval(ranking.top(self.verdict_cfg.k), query.gold_doc_ids, self.verdict_cfg)
        vg = call_generation_provider(self.generation_provider, query.text,
                                      self._context(ranking), query.answer)
        if not vr.available and not vg.available:
            return None
        record = SuccessRecord(query.query_id, vr.passed, vg.passed, success(vr, vg))
        self.success_log.append(record)
        if record.success:
            self.process_verified_query(query, units, ranking, store)
        return record

    def _context(self, ranking: RankedList) -> list[str]:
        if self.generation_provider is None:
            return []
        ids = ranking.top(self.context_size)
        if self.doc_texts is not None:
            return [self.doc_texts[d] for d in ids]
        return [self.store.sparse_texts[self.store.position[d]] for d in ids]

    def process_verified_query(self, query: QueryRecord, units: Sequence[ExpansionUnit],
                               ranking: RankedList | None = None, store: KeyStore | None = None) -> None:
        store = store or self.store
        units = list(units)
        if ranking is None:
            ranking = self.expanded_ranking(query, units, store)
        doc_ids = ranking.top(self.cfg.attribution_depth)
        rows = [store.position[d] for d in doc_ids]
        if self.backend is Backend.SPARSE:
            deltas = np.array([[sparse_attribution_gain(store.bm25, query.text, r, u,
                                                        self.cfg.bm25_k1, self.cfg.bm25_b)
                                for u in units] for r in rows])
        else:
            deltas = attribution_matrix(query.vector, store.matrix[rows],
                                        np.vstack([u.vector for u in units]), self.kind)
        records = attribution_records(query.query_id, doc_ids, units, deltas)
        with self._batch_lock:
            self.batch.records.append(BatchRecord(query, units, ranking, records))
            if len(self.batch) >= self.cfg.batch_capacity:
                self.flush()

    def flush(self) -> bool:
        """Accumulate the open batch into memories and run the saturation rule.

        Returns whether the batch triggered an evolution step.
        """
        with self._batch_lock:
            if not self.batch.records:
                return False
            by_doc: dict[str, list[AttributionRecord]] = {}
            for rec in self.batch.records:
                for a in rec.attributions:
                    by_doc.setdefault(a.doc_id, []).append(a)
                    if a.increment > 0.0:
                        self.contributors.add(a.query_id)
            for doc_id, recs in by_doc.items():
                accumulate(self.memory(doc_id), recs)
            gain = branch_gain(self.batch)
            self.batch.clear(self.store.epoch)
            saturated = saturation_check(self.tracker, gain)
            if saturated:
                self.evolve()
                self.tracker = self.tracker.fresh()
                self.rounds += 1
            return saturated

    def evolve(self) -> list[StepEvent]:
        if not self._writer.acquire(blocking=False):
            raise ConcurrentWriterError("another evolution step is in progress")
        try:
            new_store, events = evolve_keys(self.store, self.memories, self.cfg)
            if events:
                self.store = new_store
                self.trace.extend(events)
                self.evolution_steps += 1
                logger.debug("evolution step %d updated %d keys", new_store.epoch, len(events))
            return events
        finally:
            self._writer.release()

    def finalize(self) -> list[StepEvent]:
        """End of a finite stream: flush the partial batch; offline mode then runs
        the closing evolution step so every key reflects its final top-x set."""
        self.flush()
        if self.cfg.mode is Mode.OFFLINE:
            return self.evolve()
        return []

    def memory_sources(self) -> set[str]:
        return {q for mem in self.memories.values() for e in mem.entries.values() for q in e.sources}

    def stats(self) -> dict:
        disp = [e.displacement for e in self.trace]
        cumulative: dict[str, float] = {}
        for e in self.trace:
            cumulative[e.doc_id] = cumulative.get(e.doc_id, 0.0) + e.displacement
        return {
            "evolution_steps": self.evolution_steps,
            "saturation_rounds": self.rounds,
            "keys_updated": len(cumulative),
            "merges": sum(len(e.unit_ids) for e in self.trace),
            "max_step_displacement": max(disp) if disp else 0.0,
            "max_cumulative_displacement": max(cumulative.values()) if cumulative else 0.0,
            "verified_queries": sum(1 for r in self.success_log if r.success),
            "judged_queries": len(self.success_log),
        }
