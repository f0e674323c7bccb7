"""Zipf-distributed intent streams, per-intent expansion caching and the
amortized-cost ledger."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .attribution import ExpansionUnit, make_unit
from .index import KeyStore, QueryRecord
from .similarity import NormBound, tokenize
from .validation import check_fraction, check_positive_int

logger = logging.getLogger(__name__)

Provider = Callable[[QueryRecord], Sequence[ExpansionUnit]]


@dataclass(frozen=True, eq=False)
class ZipfIntentModel:
    """i.i.d. intent ranks with ``P(r) = r**-alpha / H(m, alpha)`` on ``1..m``."""

    m: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.m, "m")
        if not (math.isfinite(self.alpha) and self.alpha > 1.0):
            raise ValueError(f"Zipf exponent must exceed 1, got {self.alpha}")
        object.__setattr__(self, "_rng", np.random.default_rng(self.seed))

    @cached_property
    def harmonic(self) -> float:
        return float(np.sum(np.arange(1, self.m + 1, dtype=np.float64) ** -self.alpha))

    @cached_property
    def probabilities(self) -> np.ndarray:
        p = np.arange(1, self.m + 1, dtype=np.float64) ** -self.alpha
        return p / p.sum()

    @cached_property
    def _cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.probabilities)
        cdf[-1] = 1.0
        return cdf

    def sample(self, size: int) -> np.ndarray:
        u = self._rng.random(size)
        return np.minimum(np.searchsorted(self._cdf, u, side="right"), self.m - 1) + 1

    def sample_intent(self) -> int:
        return int(self.sample(1)[0])

    def reset(self) -> None:
        object.__setattr__(self, "_rng", np.random.default_rng(self.seed))


@dataclass
class ExpansionCache:
    """At most one successful provider call per distinct intent key."""

    enabled: bool = True
    store: dict[str, list[ExpansionUnit]] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0
    failures: int = 0
    provider_calls: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()


def get_or_expand(cache: ExpansionCache, query: QueryRecord, provider: Provider) -> list[ExpansionUnit]:
    if cache.enabled:
        units = cache.store.get(query.intent_key)
        if units is not None:
            cache.hits += 1
            return units
    cache.misses += 1
    cache.provider_calls += 1
    try:
        units = list(provider(query))
    except Exception:
        # failures are not cached, so the intent is retried next time
        cache.failures += 1
        logger.warning("expansion provider failed for %s", query.query_id, exc_info=True)
        return []
    if cache.enabled:
        with cache._lock:
            cache.store.setdefault(query.intent_key, units)
    return units


@dataclass
class CostLedger:
    T: int = 0
    D_T: int = 0
    provider_calls: int = 0
    checkpoints: list[tuple[int, int, int, float]] = field(default_factory=list)
    degenerate: bool = False

    def record(self, t: int, distinct: int, calls: int) -> None:
        self.checkpoints.append((t, distinct, calls, calls / t))

    def amortized(self) -> list[float]:
        return [c[3] for c in self.checkpoints]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "D_t", "provider_calls", "amortized_cost"])
            for t, d, calls, amort in self.checkpoints:
                writer.writerow([t, d, calls, repr(amort)])

    def summary(self) -> dict:
        return {"T": self.T, "D_T": self.D_T, "provider_calls": self.provider_calls,
                "amortized_cost": self.provider_calls / self.T if self.T else 0.0}


def checkpoint_schedule(T: int, start_exp: int = 10) -> list[int]:
    """Powers of two from ``2**start_exp`` up to ``T``, with ``T`` itself appended."""
    points = []
    e = start_exp
    while 2 ** e <= T:
        points.append(2 ** e)
        e += 1
    if not points or points[-1] != T:
        points.append(T)
    return points


def fit_loglog_slope(ts: Sequence[float], ds: Sequence[float]) -> float:
    x, y = np.log(np.asarray(ts, float)), np.log(np.asarray(ds, float))
    if len(x) < 2:
        return 0.0
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def intent_query(rank: int) -> QueryRecord:
    return QueryRecord(f"intent-{rank}", f"intent {rank}")


def _null_provider(query: QueryRecord) -> list[ExpansionUnit]:
    return []


def measure_cost(ledger: CostLedger, model: ZipfIntentModel, T: int, provider: Provider | None = None,
                 cache: ExpansionCache | None = None, on_query: Callable | None = None,
                 query_for: Callable[[int], QueryRecord] = intent_query,
                 checkpoints: Iterable[int] | None = None) -> float:
    """Stream ``T`` intents through the cache and return the fitted log-log slope of
    the distinct-intent count ``D_t`` against ``t``.

    ``on_query(query, units)`` lets a caller drive a full adaptation pipeline with
    the same stream.
    """
    T = check_positive_int(T, "T")
    provider = provider or _null_provider
    cache = cache if cache is not None else ExpansionCache()
    points = sorted(set(checkpoints)) if checkpoints is not None else checkpoint_schedule(T)
    pending = [p for p in points if p <= T]
    queries: dict[int, QueryRecord] = {}
    seen: set[str] = set()
    calls0 = cache.provider_calls
    nxt = 0
    for t, r in enumerate(model.sample(T), start=1):
        r = int(r)
        query = queries.get(r)
        if query is None:
            query = queries[r] = query_for(r)
        seen.add(query.intent_key)
        units = get_or_expand(cache, query, provider)
        if on_query is not None:
            on_query(query, units)
        if nxt < len(pending) and t == pending[nxt]:
            ledger.record(t, len(seen), cache.provider_calls - calls0)
            nxt += 1
    ledger.T = T
    ledger.D_T = len(seen)
    ledger.provider_calls = cache.provider_calls - calls0
    ledger.degenerate = model.m == 1
    if ledger.degenerate:
        return 0.0
    ts = [c[0] for c in ledger.checkpoints]
    ds = [c[1] for c in ledger.checkpoints]
    return fit_loglog_slope(ts, ds)


def _seed_for(seed: int, *parts: str) -> int:
    h = hashlib.blake2b("\x1f".join([str(seed), *parts]).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class SyntheticExpansionProvider:
    """Deterministic offline expander.

    Each unit vector is the normalized mixture ``(1 - noise) * g + noise * n`` of a
    gold key direction ``g`` (cycled over the query's gold documents) and a random
    unit direction ``n``; unit text mixes gold-key tokens with noise tokens in the
    same proportion. Queries without gold documents get pure-noise units.
    """

    def __init__(self, store: KeyStore, noise: float = 0.2, seed: int = 0,
                 units_per_query: int = 3, norm_bound: float = 1.0, tokens_per_unit: int = 6):
        self.store = store
        self.noise = check_fraction(noise, "noise")
        self.seed = seed
        self.units_per_query = check_positive_int(units_per_query, "units_per_query")
        self.norm_bound = NormBound(norm_bound)
        self.tokens_per_unit = tokens_per_unit

    def __call__(self, query: QueryRecord) -> list[ExpansionUnit]:
        rng = np.random.default_rng(_seed_for(self.seed, query.intent_key))
        store = self.store
        golds = sorted(g for g in query.gold_doc_ids if g in store.position)
        units = []
        for j in range(self.units_per_query):
            noise_dir = rng.standard_normal(store.dim)
            noise_dir /= np.linalg.norm(noise_dir)
            if golds:
                pos = store.position[golds[j % len(golds)]]
                g = store.matrix[pos] / np.linalg.norm(store.matrix[pos])
                vec = (1.0 - self.noise) * g + self.noise * noise_dir
                gold_tokens = tokenize(store.sparse_texts[pos])
            else:
                vec = noise_dir
                gold_tokens = []
            norm = np.linalg.norm(vec)
            vec = vec / norm if norm > 0 else noise_dir
            words = []
            for _ in range(self.tokens_per_unit):
                if gold_tokens and rng.random() >= self.noise:
                    words.append(gold_tokens[int(rng.integers(len(gold_tokens)))])
                else:
                    words.append(f"noise{int(rng.integers(10**6))}")
            # the tag keeps distinct units from colliding on identical token draws
            words.append(f"exp{query.intent_key[:8]}n{j}")
            units.append(make_unit(" ".join(words), vec, self.norm_bound))
        return units


def synthetic_expansion_provider(query: QueryRecord, corpus: KeyStore, noise: float = 0.2, seed: int = 0,
                                 units_per_query: int = 3) -> list[ExpansionUnit]:
    return SyntheticExpansionProvider(corpus, noise, seed, units_per_query)(query)
