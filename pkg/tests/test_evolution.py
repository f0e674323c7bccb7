import math
import threading

import numpy as np
import pytest

from erm.attribution import ExpansionMemory, accumulate, AttributionRecord, make_unit
from erm.evolution import (NO_GAIN, AdaptationBatch, Backend, BranchGainTracker, ConcurrentWriterError,
                           EvolutionConfig, EvolutionEngine, Mode, branch_gain, evolve_keys,
                           query_after_evolution, saturation_check)
from erm.index import KeyStore, QueryRecord
from erm.verifier import RetrievalVerdictConfig


def _store(n=4, dim=4):
    return KeyStore(tuple(f"d{i}" for i in range(n)), np.eye(n, dim), tuple(f"word{i}" for i in range(n)),
                    (frozenset(),) * n, (0,) * n)


def _query(i, gold, vec):
    return QueryRecord(f"q{i}", f"query {i}", np.asarray(vec, float), frozenset({gold}))


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(x=0)
    with pytest.raises(ValueError):
        EvolutionConfig(x=5, memory_capacity=4)
    with pytest.raises(ValueError):
        EvolutionConfig(rho=1.0)
    with pytest.raises(ValueError):
        EvolutionConfig(norm_bound=-1)
    assert EvolutionConfig(mode="online").mode is Mode.ONLINE


def test_branch_gain_of_empty_batch():
    assert branch_gain(AdaptationBatch()) == NO_GAIN


@pytest.mark.parametrize("gains,expected", [
    ([1.0, 0.9, 0.9, 0.9], [False, False, False, True]),
    ([1.0, 0.9, 0.95, 0.9, 0.9, 0.9], [False, False, False, False, False, True]),
    ([1.0, 0.9, 2.0, 1.8, 1.8, 1.8], [False, False, False, False, False, True]),
])
def test_saturation_patience(gains, expected):
    tracker = BranchGainTracker(3, 0.1)
    assert [saturation_check(tracker, g) for g in gains] == expected
    assert tracker.patience_used <= 3


def test_fresh_tracker_forgets_history():
    t = BranchGainTracker(2, 0.2, best_gain=5.0, history=[5.0], patience_used=1)
    f = t.fresh()
    assert f.best_gain == NO_GAIN and f.history == [] and f.patience_used == 0


def _memories(store, scores):
    mems = {}
    for doc_id, units in scores.items():
        mem = mems[doc_id] = ExpansionMemory(doc_id, 8)
        accumulate(mem, [AttributionRecord(doc_id, u, s, 1.0, "q") for u, s in units])
    return mems


def test_evolve_keys_bounds_and_noop():
    store = _store()
    units = [make_unit(f"unit {j}", np.full(4, 2.0)) for j in range(4)]
    mems = _memories(store, {"d0": [(u, 1.0 + j) for j, u in enumerate(units)]})
    cfg = EvolutionConfig(x=3, norm_bound=1.0)
    new, events = evolve_keys(store, mems, cfg)
    assert len(events) == 1 and events[0].version_after == 1
    assert events[0].displacement <= 3.0 + 1e-12
    assert new.versions == (1, 0, 0, 0) and store.versions == (0, 0, 0, 0)
    assert len(new.merged[0]) == 3
    again, more = evolve_keys(new, mems, cfg)
    assert more == [] and again is new


def test_engine_end_to_end_moves_gold_key():
    store = _store()
    eng = EvolutionEngine(store, EvolutionConfig(x=1, batch_capacity=2, patience=1),
                          verdict_cfg=RetrievalVerdictConfig(k=4))
    unit = make_unit("toward d2", np.array([0.0, 0.0, 1.0, 0.0]))
    for i in range(6):
        eng.observe(_query(i, "d2", [0.3, 0.0, 0.2, 0.0]), [unit])
    eng.finalize()
    assert eng.store.versions[2] >= 1
    assert eng.retrieve(_query(99, "d2", [0.3, 0.0, 0.2, 0.0]), 1).doc_ids == ["d2"]
    assert eng.retrieve(_query(99, "d2", [0.3, 0.0, 0.2, 0.0]), 1, frozen=True).doc_ids == ["d0"]
    assert all(e.displacement <= 1.0 + 1e-12 for e in eng.trace)


def test_finalize_offline_vs_online():
    unit = make_unit("toward d1", np.array([0.0, 1.0, 0.0, 0.0]))
    for mode, evolved in ((Mode.OFFLINE, True), (Mode.ONLINE, False)):
        eng = EvolutionEngine(_store(), EvolutionConfig(batch_capacity=100, mode=mode))
        eng.observe(_query(0, "d1", [0.0, 1.0, 0.0, 0.0]), [unit])
        eng.finalize()
        assert (eng.store.versions[1] == 1) is evolved
        assert not eng.batch.records


def test_zero_verified_queries_leave_keys_alone():
    eng = EvolutionEngine(_store(), verdict_cfg=RetrievalVerdictConfig(k=1))
    unit = make_unit("nothing", np.array([1.0, 0.0, 0.0, 0.0]))
    for i in range(5):
        eng.observe(_query(i, "d3", [1.0, 0.0, 0.0, 0.0]), [unit])
    eng.finalize()
    assert eng.trace == [] and eng.store is eng.base_store


def test_snapshot_readers_are_isolated():
    eng = EvolutionEngine(_store(), EvolutionConfig(batch_capacity=1, patience=1))
    before = eng.store
    unit = make_unit("toward d1", np.array([0.0, 1.0, 0.0, 0.0]))
    for i in range(4):
        eng.observe(_query(i, "d1", [0.0, 1.0, 0.0, 0.0]), [unit])
    eng.finalize()
    assert eng.store is not before
    np.testing.assert_array_equal(before.matrix, np.eye(4))


def test_second_writer_is_rejected():
    eng = EvolutionEngine(_store())
    eng._writer.acquire()
    try:
        with pytest.raises(ConcurrentWriterError):
            eng.evolve()
    finally:
        eng._writer.release()


def test_concurrent_readers_during_adaptation():
    eng = EvolutionEngine(_store(), EvolutionConfig(batch_capacity=1, patience=1))
    unit = make_unit("toward d1", np.array([0.0, 1.0, 0.0, 0.0]))
    errors = []

    def reader():
        try:
            for _ in range(200):
                r = eng.retrieve(_query(0, "d1", [0.0, 1.0, 0.0, 0.0]), 2)
                assert len(r) == 2
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for i in range(50):
        eng.observe(_query(i, "d1", [0.0, 1.0, 0.0, 0.0]), [unit])
    for t in threads:
        t.join()
    assert not errors


def test_sparse_backend_appends_unit_text():
    store = KeyStore(("a", "b"), np.eye(2), ("apple pie", "banana bread"), (frozenset(),) * 2, (0, 0))
    eng = EvolutionEngine(store, EvolutionConfig(x=1), backend=Backend.SPARSE)
    q = QueryRecord("q", "crust banana", None, frozenset({"b"}))
    eng.observe(q, [make_unit("crust", np.array([1.0, 0.0]))])
    eng.finalize()
    assert eng.store.sparse_texts[1] == "banana bread crust"
    assert query_after_evolution(eng.store, q, 1, backend="sparse").doc_ids == ["b"]


def test_stats_after_run():
    eng = EvolutionEngine(_store(), EvolutionConfig(batch_capacity=1, patience=1))
    unit = make_unit("toward d1", np.array([0.0, 1.0, 0.0, 0.0]))
    for i in range(3):
        eng.observe(_query(i, "d1", [0.0, 1.0, 0.0, 0.0]), [unit])
    eng.finalize()
    s = eng.stats()
    assert s["verified_queries"] == 3 and s["keys_updated"] == 1 and s["merges"] == 1
    assert math.isfinite(s["max_step_displacement"])
