"""scikit-learn style front end: ``fit`` adapts the index on a query stream,
``predict`` retrieves against the evolved keys."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .evolution import Backend, EvolutionConfig, EvolutionEngine, Mode
from .index import Document, KeyStore, KeyStrategy, QueryRecord, RankedList, build_index
from .metrics import ndcg_at_k
from .similarity import MockEmbedder, SimilarityKind
from .validation import check_indexed
from .verifier import RetrievalVerdictConfig
from .workload import ExpansionCache, SyntheticExpansionProvider, get_or_expand


class EvolvingRetrievalMemory(BaseEstimator):
    """Retrieval index whose keys absorb verified query-expansion signals.

    Parameters mirror the evolution, verifier and provider settings. ``embedder``,
    ``expansion_provider`` and ``generation_provider`` default to the offline
    built-ins (hashing embedder, gold-aware synthetic expander, no judge).

    Examples
    --------
    >>> from erm.synthetic import make_planted_corpus
    >>> docs, queries = make_planted_corpus(n_docs=50, n_queries=20, n_intents=5)
    >>> erm = EvolvingRetrievalMemory(embed_dim=32).fit(queries, corpus=docs)
    >>> len(erm.predict(queries[:2], n=5))
    2
    """

    def __init__(self, *, backend="dense", similarity="inner_product", key_strategy="full_text",
                 x=3, batch_capacity=16, memory_capacity=32, patience=3, rho=0.1, norm_bound=1.0,
                 mode="offline", attribution_depth=1, verifier_metric="gold_hit_at_k", verifier_k=10,
                 verifier_threshold=1.0, noise=0.2, units_per_query=3, use_cache=True,
                 embed_dim=128, seed=0, embedder=None, expansion_provider=None, generation_provider=None):
        self.backend = backend
        self.similarity = similarity
        self.key_strategy = key_strategy
        self.x = x
        self.batch_capacity = batch_capacity
        self.memory_capacity = memory_capacity
        self.patience = patience
        self.rho = rho
        self.norm_bound = norm_bound
        self.mode = mode
        self.attribution_depth = attribution_depth
        self.verifier_metric = verifier_metric
        self.verifier_k = verifier_k
        self.verifier_threshold = verifier_threshold
        self.noise = noise
        self.units_per_query = units_per_query
        self.use_cache = use_cache
        self.embed_dim = embed_dim
        self.seed = seed
        self.embedder = embedder
        self.expansion_provider = expansion_provider
        self.generation_provider = generation_provider

    # -- configuration ---------------------------------------------------------
    def evolution_config(self) -> EvolutionConfig:
        return EvolutionConfig(
            x=self.x, batch_capacity=self.batch_capacity, memory_capacity=self.memory_capacity,
            norm_bound=self.norm_bound, mode=Mode(self.mode), patience=self.patience, rho=self.rho,
            attribution_depth=self.attribution_depth,
        )

    def verdict_config(self) -> RetrievalVerdictConfig:
        return RetrievalVerdictConfig(self.verifier_metric, self.verifier_k, self.verifier_threshold)

    def _embedder(self):
        if self.embedder is not None:
            return self.embedder
        if getattr(self, "_default_embedder", None) is None:
            self._default_embedder = MockEmbedder(self.embed_dim, self.seed)
        return self._default_embedder

    # -- indexing ----------------------------------------------------------------
    def set_corpus(self, corpus: Iterable[Document] | KeyStore) -> "EvolvingRetrievalMemory":
        """Build (or adopt) the version-0 index. Also resets any adaptation state."""
        if isinstance(corpus, KeyStore):
            self.docs_ = None
            self.base_store_ = corpus
        else:
            self.docs_ = list(corpus)
            self.base_store_ = build_index(self.docs_, KeyStrategy.parse(self.key_strategy), self._embedder())
        self.n_features_in_ = self.base_store_.dim
        self._reset()
        return self

    def _reset(self) -> None:
        cfg = self.evolution_config()
        self.cache_ = ExpansionCache(enabled=self.use_cache)
        self.provider_ = self.expansion_provider or SyntheticExpansionProvider(
            self.base_store_, self.noise, self.seed, self.units_per_query, cfg.norm_bound)
        doc_texts = {d.doc_id: d.text for d in self.docs_} if self.docs_ else None
        self.engine_ = EvolutionEngine(
            self.base_store_, cfg, SimilarityKind.parse(self.similarity), Backend(self.backend),
            self.verdict_config(), self.generation_provider, doc_texts,
        )
        self.store_ = self.base_store_

    def _prepare(self, X) -> list[QueryRecord]:
        embed = self._embedder()
        out = []
        for q in X:
            if isinstance(q, dict):
                q = QueryRecord(q["query_id"], q["text"], None, q.get("gold_doc_ids", ()), q.get("answer"))
            if q.vector is None:
                q = q.with_vector(embed(q.text))
            elif q.vector.shape[0] != self.n_features_in_:
                raise ValueError(f"query {q.query_id} has dim {q.vector.shape[0]}, index has {self.n_features_in_}")
            out.append(q)
        return out

    # -- estimator API -------------------------------------------------------------
    def fit(self, X: Sequence[QueryRecord], y=None, *, corpus=None) -> "EvolvingRetrievalMemory":
        """Reset keys to version 0 and adapt them on the query stream ``X``."""
        if corpus is not None:
            self.set_corpus(corpus)
        check_indexed(self, ("base_store_",))
        self._reset()
        self.partial_fit(X)
        self.engine_.finalize()
        self.store_ = self.engine_.store
        return self

    def partial_fit(self, X: Sequence[QueryRecord], y=None) -> "EvolvingRetrievalMemory":
        """Continue adapting without resetting; the trailing partial batch stays open."""
        check_indexed(self, ("engine_",))
        for query in self._prepare(X):
            units = get_or_expand(self.cache_, query, self.provider_)
            self.engine_.observe(query, units)
        self.store_ = self.engine_.store
        return self

    def finalize(self) -> "EvolvingRetrievalMemory":
        self.engine_.finalize()
        self.store_ = self.engine_.store
        return self

    def predict(self, X: Sequence[QueryRecord], n: int = 10, frozen: bool = False) -> list[RankedList]:
        check_indexed(self, ("store_",))
        return [self.engine_.retrieve(q, n, frozen=frozen) for q in self._prepare(X)]

    def retrieve(self, query: QueryRecord, n: int = 10, frozen: bool = False) -> RankedList:
        return self.engine_.retrieve(query, n, frozen=frozen)

    def score(self, X, y=None, k: int = 10) -> float:
        """Mean nDCG@k over queries that have gold documents."""
        X = [q for q in self._prepare(X) if q.gold_doc_ids]
        if not X:
            return 0.0
        rankings = [self.engine_.retrieve(q, k) for q in X]
        return float(np.mean([ndcg_at_k(r, q.gold_doc_ids, k) for r, q in zip(rankings, X)]))

    @property
    def memories_(self):
        return self.engine_.memories
