"""Correctness gate: a query's expansions may only be cached when retrieval or
generation is verified correct."""

from __future__ import annotations

import enum
import logging
import os
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Protocol, Sequence

from .metrics import hit_at_k, recall_at_k
from .similarity import tokenize
from .validation import check_fraction, check_positive_int

logger = logging.getLogger(__name__)


class VerifierOutcome(NamedTuple):
    passed: bool
    available: bool

    def __bool__(self) -> bool:
        return self.passed


UNAVAILABLE = VerifierOutcome(False, False)


class RetrievalMetric(str, enum.Enum):
    RECALL_AT_K = "recall_at_k"
    GOLD_HIT_AT_K = "gold_hit_at_k"


@dataclass(frozen=True)
class RetrievalVerdictConfig:
    metric: RetrievalMetric = RetrievalMetric.GOLD_HIT_AT_K
    k: int = 10
    threshold: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "metric", RetrievalMetric(self.metric))
        check_positive_int(self.k, "k")
        check_fraction(self.threshold, "threshold", 0.0, 1.0, closed_low=False)


@dataclass(frozen=True)
class GenerationVerdict:
    score: float
    passed: bool


@dataclass(frozen=True)
class SuccessRecord:
    query_id: str
    vr: bool
    vg: bool
    success: bool


def verify_retrieval(ranking, gold, cfg: RetrievalVerdictConfig = RetrievalVerdictConfig()) -> VerifierOutcome:
    gold = set(gold)
    if not gold:
        return UNAVAILABLE
    if cfg.metric is RetrievalMetric.GOLD_HIT_AT_K:
        return VerifierOutcome(hit_at_k(ranking, gold, cfg.k), True)
    return VerifierOutcome(recall_at_k(ranking, gold, cfg.k) >= cfg.threshold, True)


def verify_generation(verdict: GenerationVerdict | None) -> VerifierOutcome:
    if verdict is None:
        return UNAVAILABLE
    return VerifierOutcome(bool(verdict.passed), True)


def success(vr, vg) -> bool:
    return bool(vr) or bool(vg)


class GenerationVerdictProvider(Protocol):
    def __call__(self, query_text: str, context_texts: Sequence[str],
                 gold_answer: str | None = None) -> GenerationVerdict | None: ...


def token_f1(candidate: str, reference: str) -> float:
    cand, ref = Counter(tokenize(candidate)), Counter(tokenize(reference))
    overlap = sum((cand & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(cand.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


class TokenF1Provider:
    """Offline stand-in for a judge: the "answer" is each of the top ``n_context``
    retrieved texts, scored by token F1 against the gold answer."""

    def __init__(self, threshold: float = 0.5, n_context: int = 1):
        self.threshold = threshold
        self.n_context = n_context

    def __call__(self, query_text, context_texts, gold_answer=None):
        if not gold_answer or not context_texts:
            return None
        score = max(token_f1(t, gold_answer) for t in context_texts[: self.n_context])
        return GenerationVerdict(score=score, passed=score >= self.threshold)


GENERATION_PROVIDERS = {
    "none": lambda: None,
    "token_f1": TokenF1Provider,
}


def generation_provider_from_env(default: str = "none") -> GenerationVerdictProvider | None:
    name = os.environ.get("ERM_GEN_PROVIDER", default).strip().lower()
    if name not in GENERATION_PROVIDERS:
        raise ValueError(f"unknown ERM_GEN_PROVIDER {name!r}; choose from {sorted(GENERATION_PROVIDERS)}")
    return GENERATION_PROVIDERS[name]()


def call_generation_provider(provider, query_text, context_texts, gold_answer) -> VerifierOutcome:
    if provider is None:
        return UNAVAILABLE
    try:
        verdict = provider(query_text, context_texts, gold_answer)
    except Exception:  # provider failures degrade to "unavailable"
        logger.warning("generation verdict provider failed", exc_info=True)
        return UNAVAILABLE
    return verify_generation(verdict)
