"""Brute-force validators for the formal guarantees of key evolution.

Each oracle recomputes its quantity along a path separate from the pipeline it
checks (closed-form bilinear gains, exhaustive subset enumeration, exact
expectations), so agreement is evidence rather than a tautology. Statistical
checks assert at four standard errors; algebraic identities at ``1e-9``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attribution import (
    AttributionRecord,
    ExpansionMemory,
    ExpansionUnit,
    accumulate,
    attribution_gain,
    make_unit,
    ranked_entries,
    softmax_weights,
    top_x,
)
from .index import DocumentKey, KeyStore, retrieve_top_n
from .similarity import SimilarityKind

SIGMAS = 4.0
IDENTITY_TOL = 1e-9
MIN_HORIZON = 1000


@dataclass
class OracleReport:
    name: str
    passed: bool | None
    flags: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=float)


@dataclass(eq=False)
class PlantedScenario:
    """One document with a frozen key, a fixed unit set and a Gaussian query law.

    ``query_std`` may be a scalar or a per-coordinate array; coordinates with zero
    spread let a unit be planted orthogonal to every query.
    """

    key: np.ndarray
    units: list[ExpansionUnit]
    query_mean: np.ndarray
    query_std: np.ndarray | float = 0.5
    success_prob: float = 1.0
    seed: int = 0
    doc_id: str = "d0"

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        d = self.query_mean.shape[0]
        queries = self.query_mean + rng.standard_normal((n, d)) * np.asarray(self.query_std)
        succeeded = rng.random(n) < self.success_prob
        return queries, succeeded

    @property
    def unit_matrix(self) -> np.ndarray:
        return np.vstack([u.vector for u in self.units])


def _units(vectors, prefix="unit") -> list[ExpansionUnit]:
    return [make_unit(f"{prefix} {j}", v) for j, v in enumerate(vectors)]


def consistency_scenario(seed: int = 0) -> PlantedScenario:
    """Three units with well separated expected gains (largest first)."""
    mean = np.array([1.0, 0.4, 0.0, 0.0, 0.0, 0.0])
    std = np.array([0.5, 0.5, 0.5, 0.5, 0.5, 0.0])
    vecs = [
        [0.80, 0.30, 0.10, 0.00, 0.00, 0.0],
        [0.45, 0.00, 0.30, 0.20, 0.00, 0.0],
        [0.15, 0.10, 0.00, 0.00, 0.30, 0.0],
    ]
    key = np.array([0.2, -0.1, 0.3, 0.0, 0.1, 0.5])
    return PlantedScenario(key, _units(np.array(vecs)), mean, std, success_prob=0.8, seed=seed)


def optimality_scenario(seed: int = 0) -> PlantedScenario:
    """Four units; the best pair is not simply the two largest vectors' sum by norm."""
    mean = np.array([1.0, 0.6, 0.0, 0.0, 0.0, 0.0])
    std = np.array([0.4, 0.4, 0.4, 0.4, 0.4, 0.0])
    vecs = [
        [0.70, 0.20, 0.00, 0.10, 0.00, 0.0],
        [0.10, 0.75, 0.20, 0.00, 0.00, 0.0],
        [0.30, 0.10, 0.60, 0.00, 0.00, 0.0],
        [-0.20, 0.10, 0.00, 0.50, 0.40, 0.0],
    ]
    key = np.array([0.1, 0.1, -0.2, 0.3, 0.0, 0.4])
    return PlantedScenario(key, _units(np.array(vecs)), mean, std, success_prob=0.9, seed=seed)


def _mc_samples(scenario: PlantedScenario, samples: int, seed: int) -> np.ndarray:
    """Per-sample gated, weighted gains ``X[t, j]``, via the bilinear closed form."""
    rng = np.random.default_rng(seed)
    queries, ok = scenario.sample(rng, samples)
    gains = queries @ scenario.unit_matrix.T
    z = np.exp(gains - gains.max(axis=1, keepdims=True))
    weights = z / z.sum(axis=1, keepdims=True)
    return ok[:, None] * (gains > 0) * weights * gains


@dataclass
class MuEstimate:
    mean: dict[str, float]
    stderr: dict[str, float]
    std: dict[str, float]
    samples: int
    draws: np.ndarray = field(repr=False, default=None)

    def argmax(self, x: int) -> list[str]:
        return sorted(self.mean, key=lambda u: (-self.mean[u], u))[:x]


def mc_estimate_mu(scenario: PlantedScenario, samples: int = 100_000, seed: int | None = None) -> MuEstimate:
    if samples < 2:
        raise ValueError("need at least two samples")
    seed = scenario.seed + 7_919 if seed is None else seed
    X = _mc_samples(scenario, samples, seed)
    ids = [u.unit_id for u in scenario.units]
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1)
    return MuEstimate(
        mean=dict(zip(ids, mean.tolist())),
        stderr=dict(zip(ids, (std / math.sqrt(samples)).tolist())),
        std=dict(zip(ids, std.tolist())),
        samples=samples,
        draws=X,
    )


def run_frozen_pipeline(scenario: PlantedScenario, T: int, watch_from: int | None = None, x: int = 1):
    """Feed ``T`` queries through the real attribution path with the key frozen.

    Returns the memory and, for every step ``t >= watch_from``, the ids returned by
    ``top_x``.
    """
    rng = np.random.default_rng(scenario.seed)
    queries, ok = scenario.sample(rng, T)
    key = DocumentKey(scenario.doc_id, scenario.key, "")
    memory = ExpansionMemory(scenario.doc_id, capacity=max(len(scenario.units), 1))
    watched = []
    for t in range(T):
        if ok[t]:
            q = queries[t]
            deltas = [attribution_gain(q, key, u, SimilarityKind.INNER_PRODUCT) for u in scenario.units]
            weights = softmax_weights(deltas)
            accumulate(memory, [AttributionRecord(scenario.doc_id, u, d, w, f"t{t}")
                                for u, d, w in zip(scenario.units, deltas, weights)])
        if watch_from is not None and t + 1 >= watch_from:
            watched.append([u.unit_id for u in top_x(memory, x)])
    return memory, watched


def check_consistency(scenario: PlantedScenario, T: int = 20_000, x: int = 1,
                      samples: int = 100_000) -> OracleReport:
    report = OracleReport("consistency", None, details={"T": T, "x": x, "samples": samples})
    if T < MIN_HORIZON:
        report.flags.append("insufficient horizon")
        return report
    mu = mc_estimate_mu(scenario, samples)
    memory, watched = run_frozen_pipeline(scenario, T, watch_from=T - T // 4, x=x)
    per_unit = {}
    for u in scenario.units:
        uid = u.unit_id
        observed = memory.score(uid) / T
        tol = SIGMAS * mu.std[uid] * math.sqrt(1.0 / T + 1.0 / samples)
        err = abs(observed - mu.mean[uid])
        per_unit[uid] = {"s_over_T": observed, "mu_hat": mu.mean[uid], "abs_err": err, "tolerance": tol}
        if err > tol:
            report.violations.append({"unit_id": uid, **per_unit[uid]})
    report.details["units"] = per_unit
    if x >= len(scenario.units):
        report.flags.append("full selection: trivially converged")
    else:
        expected = set(mu.argmax(x))
        misses = sum(1 for sel in watched if set(sel) != expected)
        report.details.update(expected_top=sorted(expected), final_quarter_steps=len(watched),
                              selection_mismatches=misses)
        if misses:
            report.violations.append({"selection_mismatches": misses})
    report.passed = not report.violations
    return report


def check_expected_optimality(scenario: PlantedScenario, x: int = 2, T: int = 20_000,
                              samples: int = 100_000) -> OracleReport:
    """Exhaustively compare every size-``x`` unit subset's expected gain with the
    subset the score accumulation converged to."""
    report = OracleReport("expected_optimality", None, details={"x": x, "T": T, "samples": samples})
    mu = mc_estimate_mu(scenario, samples)
    memory, _ = run_frozen_pipeline(scenario, T)
    converged = [e.unit.unit_id for e in ranked_entries(memory, x)]
    ids = [u.unit_id for u in scenario.units]
    X = mu.draws
    col = {uid: j for j, uid in enumerate(ids)}
    sums = {}
    for subset in itertools.combinations(ids, min(x, len(ids))):
        sums[subset] = float(sum(mu.mean[u] for u in subset))
    best = max(sums, key=lambda s: (sums[s], tuple(-col[u] for u in s)))
    conv_sum = float(sum(mu.mean.get(u, 0.0) for u in converged))
    diff = X[:, [col[u] for u in best]].sum(axis=1) - X[:, [col[u] for u in converged]].sum(axis=1) \
        if converged else X[:, [col[u] for u in best]].sum(axis=1)
    stderr = float(diff.std(ddof=1) / math.sqrt(samples))
    gap = sums[best] - conv_sum
    report.details.update(
        subsets_checked=len(sums),
        converged=sorted(converged),
        best_subset=sorted(best),
        converged_sum=conv_sum,
        best_sum=sums[best],
        gap=gap,
        tolerance=SIGMAS * stderr,
    )
    if gap > SIGMAS * stderr:
        report.violations.append({"gap": gap, "tolerance": SIGMAS * stderr})
    report.passed = not report.violations
    return report


def audit_stability(trace, x: int, norm_bound: float, noop_events=None) -> OracleReport:
    """Bound every per-step key displacement by ``x * M``; optionally require the
    supplied post-convergence step to move nothing."""
    bound = x * float(norm_bound)
    report = OracleReport("stability", None, details={"bound": bound})
    cumulative: dict[str, float] = {}
    for e in trace:
        cumulative[e.doc_id] = cumulative.get(e.doc_id, 0.0) + e.displacement
        if e.displacement > bound + IDENTITY_TOL:
            report.violations.append({"doc_id": e.doc_id, "step": e.step, "displacement": e.displacement})
    report.details.update(
        steps=len({e.step for e in trace}),
        key_updates=len(trace),
        max_step_displacement=max((e.displacement for e in trace), default=0.0),
        cumulative_displacement=dict(sorted(cumulative.items())),
        total_displacement=float(sum(cumulative.values())),
    )
    if noop_events is not None:
        moved = [e for e in noop_events if e.displacement > 0.0]
        report.details["post_convergence_displacement"] = float(sum(e.displacement for e in noop_events))
        for e in moved:
            report.violations.append({"doc_id": e.doc_id, "step": e.step, "post_convergence": e.displacement})
    report.passed = not report.violations
    return report


def check_equivalence(trials: int = 10_000, dim: int = 16, n_docs: int = 8, seed: int = 0,
                      kind=SimilarityKind.INNER_PRODUCT) -> OracleReport:
    """Score identity ``sim(q + e, k) = sim(q, k) + sim(e, k)`` and the ranking it
    implies, plus the attribution shortcut ``sim(q, k + e) - sim(q, k) = sim(q, e)``."""
    kind = SimilarityKind.parse(kind)
    report = OracleReport("equivalence", None, details={"trials": trials, "dim": dim, "n_docs": n_docs,
                                                      "similarity": kind.value})
    if not kind.exact_for_evolution:
        report.flags.append("cosine: equivalence holds only approximately; not asserted")
        return report
    rng = np.random.default_rng(seed)
    ids = tuple(f"k{i}" for i in range(n_docs))
    worst = 0.0
    for trial in range(trials):
        q = rng.standard_normal(dim)
        e = rng.standard_normal(dim) * rng.uniform(0.0, 2.0)
        K = rng.standard_normal((n_docs, dim))
        store = KeyStore(ids, K, ("",) * n_docs, (frozenset(),) * n_docs, (0,) * n_docs)
        ranking = retrieve_top_n(store, q + e, n_docs, kind)
        rhs = {ids[i]: math.fsum(q[t] * K[i, t] for t in range(dim)) + math.fsum(e[t] * K[i, t] for t in range(dim))
               for i in range(n_docs)}
        for doc_id, score in ranking:
            err = abs(score - rhs[doc_id])
            worst = max(worst, err)
            if err > IDENTITY_TOL:
                report.violations.append({"trial": trial, "doc_id": doc_id, "error": err})
        ordered = [rhs[d] for d in ranking.doc_ids]
        if any(b > a + IDENTITY_TOL for a, b in zip(ordered, ordered[1:])):
            report.violations.append({"trial": trial, "ranking": ranking.doc_ids})
        shortcut = attribution_gain(q, K[0], e, kind) - math.fsum(q[t] * e[t] for t in range(dim))
        worst = max(worst, abs(shortcut))
        if abs(shortcut) > IDENTITY_TOL:
            report.violations.append({"trial": trial, "shortcut_error": shortcut})
        if len(report.violations) > 20:
            break
    report.details["max_abs_error"] = worst
    report.passed = not report.violations
    return report


def expected_distinct(probabilities: np.ndarray, t: int) -> float:
    """Exact ``E[D_t] = sum_r 1 - (1 - p_r)**t``."""
    return float(np.sum(-np.expm1(t * np.log1p(-probabilities))))


def expected_distinct_slope(probabilities: np.ndarray, checkpoints) -> float:
    ts = np.asarray(list(checkpoints), float)
    ds = np.array([expected_distinct(probabilities, int(t)) for t in ts])
    slope, _ = np.polyfit(np.log(ts), np.log(ds), 1)
    return float(slope)
