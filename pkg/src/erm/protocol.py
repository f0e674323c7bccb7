"""Repeated-holdout experiments: adapt on a random split, score the untouched rest.

Reports serialize to a versioned JSON document that is byte-identical for a fixed
configuration and seed; wall-clock measurements are kept out of it and exposed
separately on the report object.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.stats import spearmanr

from .estimator import EvolvingRetrievalMemory
from .evolution import Backend, EvolutionConfig, Mode
from .index import Document, KeyStrategy, QueryRecord, RankedList
from .io import read_corpus, read_queries
from .metrics import mrr, ndcg_at_k, recall_at_k
from .oracles import expected_distinct_slope
from .similarity import SimilarityKind
from .synthetic import make_planted_corpus
from .validation import check_fraction, check_positive_int
from .verifier import GENERATION_PROVIDERS, RetrievalVerdictConfig
from .workload import CostLedger, ExpansionCache, ZipfIntentModel, checkpoint_schedule, measure_cost

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "erm-report/1"
SWEEP_SCHEMA = "erm-sweep/1"
COST_SCHEMA = "erm-cost/1"
PROTOCOL_SPLITS = (0.3, 0.8)
DEFAULT_FRACTIONS = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
METRICS = ("ndcg@1", "ndcg@5", "ndcg@10", "recall@5", "recall@10", "mrr")
NEAR_LINEAR_ALPHA = 1.2


class ConfigError(ValueError):
    pass


class HoldoutLeakError(AssertionError):
    pass


@dataclass
class WorkloadConfig:
    m: int = 1_000_000
    alpha: float = 1.5
    seed: int = 0
    T: int = 100_000
    noise: float = 0.2
    units_per_query: int = 3

    def model(self) -> ZipfIntentModel:
        return ZipfIntentModel(self.m, self.alpha, self.seed)


@dataclass
class ExperimentConfig:
    """Everything a run needs. Without ``corpus_path`` the planted-gap generator
    supplies documents and queries, parameterized by ``synthetic``."""

    corpus_path: str | None = None
    queries_path: str | None = None
    key_strategy: str = "full_text"
    backend: str = "dense"
    similarity: str = "inner_product"
    split_fraction: float = 0.5
    seed: int = 0
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    verifier: RetrievalVerdictConfig = field(default_factory=RetrievalVerdictConfig)
    generation_provider: str | None = None
    workload: WorkloadConfig | None = None
    embed_dim: int = 128
    noise: float = 0.2
    units_per_query: int = 3
    use_cache: bool = True
    protocol_mode: bool = True
    repeats: int = 1
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ExperimentConfig":
        try:
            KeyStrategy.parse(self.key_strategy)
            Backend(self.backend)
            SimilarityKind.parse(self.similarity)
            check_positive_int(self.repeats, "repeats")
            check_positive_int(self.embed_dim, "embed_dim")
            check_fraction(self.noise, "noise")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        lo, hi = PROTOCOL_SPLITS
        if self.protocol_mode and not lo <= self.split_fraction <= hi:
            raise ConfigError(f"split_fraction must lie in [{lo}, {hi}] in protocol mode, got {self.split_fraction}")
        if not self.protocol_mode and not 0.0 <= self.split_fraction < 1.0:
            raise ConfigError(f"split_fraction must lie in [0, 1), got {self.split_fraction}")
        if (self.corpus_path is None) != (self.queries_path is None):
            raise ConfigError("corpus_path and queries_path must be given together")
        name = self.generation_provider_name()
        if name not in GENERATION_PROVIDERS:
            raise ConfigError(f"unknown generation provider {name!r}; choose from {sorted(GENERATION_PROVIDERS)}")
        return self

    def generation_provider_name(self) -> str:
        name = self.generation_provider or os.environ.get("ERM_GEN_PROVIDER", "none")
        return name.strip().lower()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["evolution"]["mode"] = self.evolution.mode.value
        d["evolution"]["norm_bound"] = float(self.evolution.norm_bound)
        d["verifier"]["metric"] = self.verifier.metric.value
        d["generation_provider"] = self.generation_provider_name()
        return d

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            if isinstance(data.get("evolution"), dict):
                evo = dict(data["evolution"])
                if "mode" in evo:
                    evo["mode"] = Mode(evo["mode"])
                data["evolution"] = EvolutionConfig(**evo)
            if isinstance(data.get("verifier"), dict):
                data["verifier"] = RetrievalVerdictConfig(**data["verifier"])
            if isinstance(data.get("workload"), dict):
                data["workload"] = WorkloadConfig(**data["workload"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a YAML or JSON config file (JSON is valid YAML)."""
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_mapping(data)


def load_inputs(cfg: ExperimentConfig) -> tuple[list[Document], list[QueryRecord]]:
    if cfg.corpus_path is not None:
        return read_corpus(cfg.corpus_path), read_queries(cfg.queries_path)
    params = {"seed": cfg.seed, **cfg.synthetic}
    return make_planted_corpus(**params)


def make_estimator(cfg: ExperimentConfig) -> EvolvingRetrievalMemory:
    evo = cfg.evolution
    return EvolvingRetrievalMemory(
        backend=cfg.backend, similarity=cfg.similarity, key_strategy=cfg.key_strategy,
        x=evo.x, batch_capacity=evo.batch_capacity, memory_capacity=evo.memory_capacity,
        patience=evo.patience, rho=evo.rho, norm_bound=evo.norm_bound, mode=evo.mode.value,
        attribution_depth=evo.attribution_depth, verifier_metric=cfg.verifier.metric,
        verifier_k=cfg.verifier.k, verifier_threshold=cfg.verifier.threshold, noise=cfg.noise,
        units_per_query=cfg.units_per_query, use_cache=cfg.use_cache, embed_dim=cfg.embed_dim,
        seed=cfg.seed, generation_provider=GENERATION_PROVIDERS[cfg.generation_provider_name()](),
    )


def split_queries(queries: Sequence[QueryRecord], fraction: float, seed: int, repeat: int = 0):
    """Seeded shuffle of the query list; the first ``round(fraction * n)`` adapt."""
    perm = np.random.default_rng([seed, repeat]).permutation(len(queries))
    n_adapt = int(round(fraction * len(queries)))
    return [queries[i] for i in perm[:n_adapt]], [queries[i] for i in perm[n_adapt:]]


def ranking_metrics(ranking: RankedList, gold) -> dict[str, float]:
    return {
        "ndcg@1": ndcg_at_k(ranking, gold, 1),
        "ndcg@5": ndcg_at_k(ranking, gold, 5),
        "ndcg@10": ndcg_at_k(ranking, gold, 10),
        "recall@5": recall_at_k(ranking, gold, 5),
        "recall@10": recall_at_k(ranking, gold, 10),
        "mrr": mrr(ranking, gold),
    }


def _mean_metrics(rows: list[dict[str, float]]) -> dict[str, float]:
    if not rows:
        return {m: 0.0 for m in METRICS}
    return {m: float(np.mean([r[m] for r in rows])) for m in METRICS}


def evaluate(est: EvolvingRetrievalMemory, holdout: Sequence[QueryRecord], frozen: bool) -> dict[str, float]:
    judged = [q for q in holdout if q.gold_doc_ids]
    return _mean_metrics([ranking_metrics(est.retrieve(q, 10, frozen=frozen), q.gold_doc_ids) for q in judged])


def assert_no_leak(est: EvolvingRetrievalMemory, holdout: Sequence[QueryRecord]) -> None:
    held = {q.query_id for q in holdout}
    touched = est.engine_.contributors | est.engine_.memory_sources()
    leaked = held & touched
    if leaked:
        raise HoldoutLeakError(f"{len(leaked)} holdout queries touched the index, e.g. {sorted(leaked)[:3]}")
    if any(v != 0 for v in est.base_store_.versions):
        raise HoldoutLeakError("baseline index is not at version 0")


def _compare(frozen: dict, evolved: dict) -> tuple[dict, dict]:
    delta = {m: evolved[m] - frozen[m] for m in METRICS}
    rel = {m: (delta[m] / frozen[m] if frozen[m] > 0 else 0.0) for m in METRICS}
    return delta, rel


@dataclass
class ExperimentReport:
    config: dict
    n_queries: int
    n_adapt: int
    n_holdout: int
    runs: list[dict]
    frozen: dict[str, float]
    evolved: dict[str, float]
    delta: dict[str, float]
    relative_gain: dict[str, float]
    cost: dict
    evolution: dict
    leak_check: str = "passed"
    timing: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("timing")
        return {"schema": REPORT_SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        lines = [f"split={self.config['split_fraction']}  adapt={self.n_adapt}  holdout={self.n_holdout}  "
                 f"repeats={len(self.runs)}",
                 f"{'metric':<10} {'frozen':>8} {'evolved':>8} {'delta':>8} {'rel':>8}"]
        for m in METRICS:
            lines.append(f"{m:<10} {self.frozen[m]:>8.4f} {self.evolved[m]:>8.4f} "
                         f"{self.delta[m]:>+8.4f} {self.relative_gain[m]:>+8.1%}")
        ev = self.evolution
        lines.append(f"evolution: steps={ev['evolution_steps']} keys_updated={ev['keys_updated']} "
                     f"merges={ev['merges']} max_step_disp={ev['max_step_displacement']:.3f}")
        lines.append(f"cost: provider_calls={self.cost['provider_calls']} distinct_intents={self.cost['distinct_intents']}")
        return "\n".join(lines)


def run_protocol(cfg: ExperimentConfig, docs=None, queries=None) -> ExperimentReport:
    """Adapt on ``cfg.repeats`` seeded random splits and score each holdout against
    both the version-0 index and the evolved one. Keys are reset before every split."""
    cfg.validate()
    if docs is None or queries is None:
        docs, queries = load_inputs(cfg)
    est = make_estimator(cfg).set_corpus(docs)
    queries = est._prepare(queries)
    runs, started = [], time.perf_counter()
    for r in range(cfg.repeats):
        adapt, holdout = split_queries(queries, cfg.split_fraction, cfg.seed, r)
        est.fit(adapt)
        assert_no_leak(est, holdout)
        frozen, evolved = evaluate(est, holdout, True), evaluate(est, holdout, False)
        stats = est.engine_.stats()
        runs.append({
            "repeat": r,
            "frozen": frozen,
            "evolved": evolved,
            "evolution": stats,
            "cost": {"provider_calls": est.cache_.provider_calls, "cache_hits": est.cache_.hits,
                     "distinct_intents": len({q.intent_key for q in adapt})},
        })
    frozen = _mean_metrics([run["frozen"] for run in runs])
    evolved = _mean_metrics([run["evolved"] for run in runs])
    delta, rel = _compare(frozen, evolved)
    mean_of = lambda part, key: float(np.mean([run[part][key] for run in runs]))
    evolution = {k: mean_of("evolution", k) for k in runs[0]["evolution"]}
    cost = {k: mean_of("cost", k) for k in runs[0]["cost"]}
    return ExperimentReport(
        config=cfg.to_dict(), n_queries=len(queries), n_adapt=len(adapt), n_holdout=len(holdout),
        runs=runs, frozen=frozen, evolved=evolved, delta=delta, relative_gain=rel, cost=cost,
        evolution=evolution, timing={"wall_clock_s": time.perf_counter() - started},
    )


@dataclass
class SweepReport:
    fractions: list[float]
    reports: list[ExperimentReport]
    spearman: float

    @property
    def evolved_ndcg10(self) -> list[float]:
        return [r.evolved["ndcg@10"] for r in self.reports]

    @property
    def frozen_ndcg10(self) -> list[float]:
        return [r.frozen["ndcg@10"] for r in self.reports]

    def to_dict(self) -> dict:
        return {
            "schema": SWEEP_SCHEMA,
            "fractions": self.fractions,
            "spearman_evolved_ndcg@10": self.spearman,
            "series": [r.to_dict() for r in self.reports],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        lines = [f"{'split':>6} {'frozen@10':>10} {'evolved@10':>10} {'rel':>8}"]
        for f, r in zip(self.fractions, self.reports):
            lines.append(f"{f:>6.2f} {r.frozen['ndcg@10']:>10.4f} {r.evolved['ndcg@10']:>10.4f} "
                         f"{r.relative_gain['ndcg@10']:>+8.1%}")
        lines.append(f"spearman(split, evolved nDCG@10) = {self.spearman:+.3f}")
        return "\n".join(lines)


def sweep_splits(cfg: ExperimentConfig, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                 docs=None, queries=None) -> SweepReport:
    lo, hi = PROTOCOL_SPLITS
    fractions = [float(f) for f in fractions]
    if not fractions or any(not lo <= f <= hi for f in fractions):
        raise ConfigError(f"sweep fractions must lie in [{lo}, {hi}]")
    if docs is None or queries is None:
        docs, queries = load_inputs(cfg)
    reports = [run_protocol(cfg.replace(split_fraction=f, protocol_mode=True), docs, queries) for f in fractions]
    series = [r.evolved["ndcg@10"] for r in reports]
    if len(set(fractions)) < 2 or len(set(series)) < 2:
        rho = 0.0
    else:
        rho = float(spearmanr(fractions, series)[0])
    return SweepReport(fractions, reports, rho)


@dataclass
class CostReport:
    alpha: float
    m: int
    T: int
    slope: float
    expected_slope: float
    oracle_slope: float
    D_T: int
    provider_calls: int
    checkpoints: list
    cache_enabled: bool
    pipeline: bool
    flags: list[str] = field(default_factory=list)
    timing: dict = field(default_factory=dict, compare=False)

    @property
    def amortized(self) -> list[float]:
        return [c[3] for c in self.checkpoints]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("timing")
        d["checkpoints"] = [dict(zip(("t", "D_t", "provider_calls", "amortized_cost"), c)) for c in self.checkpoints]
        return {"schema": COST_SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        lines = [f"alpha={self.alpha} m={self.m} T={self.T} cache={'on' if self.cache_enabled else 'off'}",
                 f"{'t':>8} {'D_t':>8} {'calls':>8} {'amortized':>10}"]
        lines += [f"{t:>8} {d:>8} {c:>8} {a:>10.5f}" for t, d, c, a in self.checkpoints]
        lines.append(f"slope={self.slope:.3f} (1/alpha={self.expected_slope:.3f}, exact expectation={self.oracle_slope:.3f})")
        lines += [f"flag: {f}" for f in self.flags]
        return "\n".join(lines)


def _templated_queries(templates: Sequence[QueryRecord]):
    """Map intent rank ``r`` to a distinct query built on template ``(r - 1) mod n``."""
    def query_for(rank: int) -> QueryRecord:
        t = templates[(rank - 1) % len(templates)]
        return QueryRecord(f"intent-{rank}", f"{t.text} intent{rank}", None, t.gold_doc_ids, t.answer)
    return query_for


def run_cost_experiment(cfg: ExperimentConfig, out_csv=None, pipeline: bool = True, docs=None,
                        queries=None) -> CostReport:
    """Stream a Zipf workload through the expansion cache and fit the growth
    exponent of the distinct-intent count.

    With ``pipeline`` every query is also verified and attributed by a live
    adaptation engine (queries are built from corpus templates); otherwise only
    the cache path runs.
    """
    if cfg.workload is None:
        raise ConfigError("cost experiment needs a workload section")
    w = cfg.workload
    model = w.model()
    cache = ExpansionCache(enabled=cfg.use_cache)
    checkpoints = checkpoint_schedule(w.T)
    started = time.perf_counter()
    ledger = CostLedger()
    if pipeline:
        if docs is None or queries is None:
            docs, queries = load_inputs(cfg)
        est = make_estimator(cfg.replace(noise=w.noise, units_per_query=w.units_per_query)).set_corpus(docs)
        embed = est._embedder()
        template = _templated_queries(queries)

        def query_for(rank):
            q = template(rank)
            return q.with_vector(embed(q.text))

        slope = measure_cost(ledger, model, w.T, est.provider_, cache, est.engine_.observe, query_for, checkpoints)
        est.finalize()
    else:
        slope = measure_cost(ledger, model, w.T, None, cache, None, checkpoints=checkpoints)
    flags = []
    if ledger.degenerate:
        flags.append("degenerate workload: single intent")
    if w.alpha < NEAR_LINEAR_ALPHA:
        flags.append("near-linear regime")
    if not cfg.use_cache:
        flags.append("cache disabled")
    oracle = expected_distinct_slope(model.probabilities, [c[0] for c in ledger.checkpoints]) \
        if not ledger.degenerate else 0.0
    report = CostReport(
        alpha=w.alpha, m=w.m, T=w.T, slope=slope, expected_slope=1.0 / w.alpha, oracle_slope=oracle,
        D_T=ledger.D_T, provider_calls=ledger.provider_calls, checkpoints=list(ledger.checkpoints),
        cache_enabled=cfg.use_cache, pipeline=pipeline, flags=flags,
        timing={"wall_clock_s": time.perf_counter() - started},
    )
    if out_csv is not None:
        ledger.to_csv(out_csv)
    return report


def measure_latency(est: EvolvingRetrievalMemory, queries: Sequence[QueryRecord], n: int = 10,
                    repeats: int = 5, warmup: int = 50) -> dict[str, float]:
    """Interleaved timing of the frozen and evolved retrieval paths.

    Each query's latency is its median over ``repeats`` passes; the reported
    figure is the mean of those over all queries. The order of the two paths
    alternates per query to cancel cache and frequency drift.
    """
    queries = est._prepare(queries)
    for q in queries[:warmup]:
        est.retrieve(q, n, frozen=True)
        est.retrieve(q, n)
    timings = {True: np.empty((repeats, len(queries))), False: np.empty((repeats, len(queries)))}
    clock = time.perf_counter_ns
    for rep in range(repeats):
        for i, q in enumerate(queries):
            order = (True, False) if (i + rep) % 2 == 0 else (False, True)
            for frozen in order:
                t0 = clock()
                est.retrieve(q, n, frozen=frozen)
                timings[frozen][rep, i] = clock() - t0
    frozen_s = float(np.median(timings[True], axis=0).mean() * 1e-9)
    evolved_s = float(np.median(timings[False], axis=0).mean() * 1e-9)
    return {"frozen_mean_s": frozen_s, "evolved_mean_s": evolved_s, "ratio": evolved_s / frozen_s,
            "queries": len(queries), "repeats": repeats}


def stability_audit(cfg: ExperimentConfig, docs=None, queries=None):
    """Offline adaptation on the configured split, then one more evolution step
    on the converged memories, which must move no key."""
    from .oracles import audit_stability

    if docs is None or queries is None:
        docs, queries = load_inputs(cfg)
    cfg = cfg.replace(evolution=dataclasses.replace(cfg.evolution, mode=Mode.OFFLINE))
    est = make_estimator(cfg).set_corpus(docs)
    adapt, _ = split_queries(est._prepare(queries), cfg.split_fraction, cfg.seed)
    est.fit(adapt)
    noop = est.engine_.evolve()
    report = audit_stability(est.engine_.trace, cfg.evolution.x, cfg.evolution.norm_bound, noop)
    report.details["verified_queries"] = est.engine_.stats()["verified_queries"]
    return report


def check_cost_report(report: CostReport, tolerance: float = 0.1) -> dict[str, bool]:
    amort = report.amortized[-3:]
    return {
        "slope_within_tolerance": abs(report.slope - report.expected_slope) <= tolerance,
        "calls_equal_distinct": report.provider_calls == report.D_T,
        "amortized_decreasing": len(amort) == 3 and all(b < a for a, b in zip(amort, amort[1:])),
    }
