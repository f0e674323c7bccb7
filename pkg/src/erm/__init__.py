"""Retrieval keys that absorb verified query-expansion signals over time."""

from .attribution import ExpansionMemory, ExpansionUnit, accumulate, attribution_gain, make_unit, top_x
from .estimator import EvolvingRetrievalMemory
from .evolution import Backend, ConcurrentWriterError, EvolutionConfig, EvolutionEngine, Mode, evolve_keys
from .index import (BM25Index, Document, KeyStore, KeyStrategy, QueryRecord, RankedList, bm25_retrieve,
                    build_index, retrieve_top_n)
from .io import export_snapshot, import_snapshot, read_corpus, read_queries
from .metrics import mrr, ndcg_at_k, recall_at_k
from .protocol import ExperimentConfig, ExperimentReport, WorkloadConfig, run_cost_experiment, run_protocol, sweep_splits
from .similarity import MockEmbedder, SimilarityKind, mock_embed
from .verifier import RetrievalVerdictConfig
from .workload import ExpansionCache, ZipfIntentModel, measure_cost

__version__ = "0.1.0"

__all__ = [
    "BM25Index", "Backend", "ConcurrentWriterError", "Document", "EvolutionConfig", "EvolutionEngine",
    "EvolvingRetrievalMemory", "ExpansionCache", "ExpansionMemory", "ExpansionUnit", "ExperimentConfig",
    "ExperimentReport", "KeyStore", "KeyStrategy", "MockEmbedder", "Mode", "QueryRecord", "RankedList",
    "RetrievalVerdictConfig", "SimilarityKind", "WorkloadConfig", "ZipfIntentModel", "accumulate",
    "attribution_gain", "bm25_retrieve", "build_index", "evolve_keys", "export_snapshot", "import_snapshot",
    "make_unit", "measure_cost", "mock_embed", "mrr", "ndcg_at_k", "read_corpus", "read_queries",
    "recall_at_k", "retrieve_top_n", "run_cost_experiment", "run_protocol", "sweep_splits", "top_x",
]
