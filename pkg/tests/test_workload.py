import csv
import math

import numpy as np
import pytest

from erm.index import KeyStore, QueryRecord
from erm.oracles import expected_distinct, expected_distinct_slope
from erm.workload import (CostLedger, ExpansionCache, SyntheticExpansionProvider, ZipfIntentModel,
                          checkpoint_schedule, fit_loglog_slope, get_or_expand, measure_cost)


def test_zipf_rank_one_frequency():
    model = ZipfIntentModel(100, 1.5, seed=4)
    n = 200_000
    freq = float(np.mean(model.sample(n) == 1))
    p1 = 0.41444350558416426  # 1 / H(100, 1.5)
    assert model.probabilities[0] == pytest.approx(p1, abs=1e-12)
    assert abs(freq - p1) <= 4 * math.sqrt(p1 * (1 - p1) / n)


def test_zipf_support_and_reset():
    model = ZipfIntentModel(7, 2.0, seed=1)
    a = model.sample(500)
    assert a.min() >= 1 and a.max() <= 7
    model.reset()
    np.testing.assert_array_equal(a, model.sample(500))


@pytest.mark.parametrize("alpha", [1.0, 0.5, float("nan")])
def test_zipf_requires_alpha_above_one(alpha):
    with pytest.raises(ValueError):
        ZipfIntentModel(10, alpha)


def test_single_intent_model_is_constant():
    assert set(ZipfIntentModel(1, 2.0).sample(50)) == {1}


def test_cache_hits_and_failures():
    calls = []

    def provider(q):
        calls.append(q.query_id)
        if "bad" in q.text:
            raise RuntimeError("upstream down")
        return ["unit"]

    cache = ExpansionCache()
    good, bad = QueryRecord("a", "good one"), QueryRecord("b", "bad one")
    assert get_or_expand(cache, good, provider) == ["unit"]
    assert get_or_expand(cache, QueryRecord("c", "Good  one"), provider) == ["unit"]
    assert get_or_expand(cache, bad, provider) == []
    assert get_or_expand(cache, bad, provider) == []
    assert (cache.hits, cache.failures, cache.provider_calls) == (1, 2, 3)


def test_disabled_cache_calls_every_time():
    cache = ExpansionCache(enabled=False)
    ledger = CostLedger()
    measure_cost(ledger, ZipfIntentModel(50, 1.5), 2000, lambda q: ["u"], cache)
    assert ledger.provider_calls == 2000


def test_checkpoint_schedule():
    assert checkpoint_schedule(5000) == [1024, 2048, 4096, 5000]
    assert checkpoint_schedule(4096) == [1024, 2048, 4096]
    assert checkpoint_schedule(100) == [100]


def test_loglog_slope_recovers_power_law():
    ts = [2.0 ** e for e in range(5, 12)]
    assert fit_loglog_slope(ts, [3 * t ** 0.4 for t in ts]) == pytest.approx(0.4)


def test_calls_equal_distinct_intents():
    ledger = CostLedger()
    measure_cost(ledger, ZipfIntentModel(10_000, 1.5, seed=2), 8192, lambda q: ["u"])
    assert ledger.provider_calls == ledger.D_T
    assert [c[0] for c in ledger.checkpoints] == [1024, 2048, 4096, 8192]
    amort = ledger.amortized()
    assert all(b < a for a, b in zip(amort, amort[1:]))


def test_slope_agrees_with_exact_expectation():
    model = ZipfIntentModel(100_000, 2.0, seed=5)
    ledger = CostLedger()
    slope = measure_cost(ledger, model, 32768)
    exact = expected_distinct_slope(model.probabilities, [c[0] for c in ledger.checkpoints])
    assert abs(slope - exact) < 0.05


def test_expected_distinct_exact_small_case():
    p = np.array([0.5, 0.5])
    assert expected_distinct(p, 1) == pytest.approx(1.0)
    assert expected_distinct(p, 2) == pytest.approx(1.5)


def test_degenerate_workload_has_zero_slope():
    ledger = CostLedger()
    assert measure_cost(ledger, ZipfIntentModel(1, 1.5), 2048) == 0.0
    assert ledger.degenerate and ledger.D_T == 1


def test_ledger_csv_columns(tmp_path):
    ledger = CostLedger()
    measure_cost(ledger, ZipfIntentModel(100, 1.5), 2048, lambda q: ["u"])
    path = tmp_path / "cost.csv"
    ledger.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "D_t", "provider_calls", "amortized_cost"]
    assert float(rows[-1][3]) == pytest.approx(int(rows[-1][2]) / 2048)


def test_synthetic_provider_points_at_gold():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((5, 16))
    store = KeyStore(tuple(f"d{i}" for i in range(5)), m, tuple(f"w{i} x{i}" for i in range(5)),
                     (frozenset(),) * 5, (0,) * 5)
    provider = SyntheticExpansionProvider(store, noise=0.2, seed=1, units_per_query=3)
    q = QueryRecord("q", "hello", None, frozenset({"d3"}))
    units = provider(q)
    assert len(units) == 3 and len({u.unit_id for u in units}) == 3
    g = m[3] / np.linalg.norm(m[3])
    for u in units:
        assert np.linalg.norm(u.vector) <= 1.0 + 1e-12
        assert u.vector @ g > 0.8
    again = provider(q)
    assert [u.unit_id for u in again] == [u.unit_id for u in units]


def test_synthetic_provider_noise_bounds():
    with pytest.raises(ValueError):
        SyntheticExpansionProvider(None, noise=1.5)
