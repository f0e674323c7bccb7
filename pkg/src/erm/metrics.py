"""Binary-relevance ranking metrics."""

from __future__ import annotations

import math
import warnings
from typing import Iterable

from .validation import check_positive_int


class UndefinedMetricWarning(UserWarning):
    pass


def _ids(ranking) -> list[str]:
    if hasattr(ranking, "doc_ids"):
        return list(ranking.doc_ids)
    return [r[0] if isinstance(r, tuple) else r for r in ranking]


def ndcg_at_k(ranking, gold: Iterable[str], k: int) -> float:
    k = check_positive_int(k, "k")
    gold = set(gold)
    if not gold:
        warnings.warn("nDCG with an empty gold set is defined as 0", UndefinedMetricWarning, stacklevel=2)
        return 0.0
    dcg = sum(1.0 / math.log2(rank + 2) for rank, d in enumerate(_ids(ranking)[:k]) if d in gold)
    ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(k, len(gold))))
    return dcg / ideal


def mrr(ranking, gold: Iterable[str]) -> float:
    gold = set(gold)
    for rank, d in enumerate(_ids(ranking), start=1):
        if d in gold:
            return 1.0 / rank
    return 0.0


def recall_at_k(ranking, gold: Iterable[str], k: int) -> float:
    k = check_positive_int(k, "k")
    gold = set(gold)
    if not gold:
        raise ValueError("recall is undefined for an empty gold set")
    return len(set(_ids(ranking)[:k]) & gold) / len(gold)


def hit_at_k(ranking, gold: Iterable[str], k: int) -> bool:
    gold = set(gold)
    return any(d in gold for d in _ids(ranking)[:k])
