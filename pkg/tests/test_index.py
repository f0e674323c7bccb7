import math

import numpy as np
import pytest

from erm.index import (BM25Index, Document, IngestionError, KeyStore, KeyStrategy, QueryRecord, RankedList,
                       bm25_retrieve, build_index, canonical_text, retrieve_top_n, stable_id)
from erm.similarity import MockEmbedder


def _store(matrix, ids=None, texts=None):
    n = len(matrix)
    ids = ids or tuple(f"d{i}" for i in range(n))
    return KeyStore(tuple(ids), np.asarray(matrix, float), tuple(texts or [""] * n),
                    (frozenset(),) * n, (0,) * n)


def test_stable_id_uses_canonical_text():
    assert canonical_text("  Foo\tBAR  baz ") == "foo bar baz"
    assert stable_id("Foo  bar") == stable_id("foo bar")
    assert len(stable_id("x")) == 16


def test_query_intent_key_groups_paraphrase_spacing():
    assert QueryRecord("a", "What is X").intent_key == QueryRecord("b", "what  is x").intent_key


def test_field_text_strategies():
    d = Document("d", "body", title="T", abstract="  ", keywords=("k1", "k2"))
    assert d.field_text(KeyStrategy.FULL_TEXT) == "body"
    assert d.field_text(KeyStrategy.TITLE) == "T"
    assert d.field_text(KeyStrategy.ABSTRACT) is None
    assert d.field_text(KeyStrategy.KEYWORDS) == "k1 k2"


def test_build_index_errors():
    emb = MockEmbedder(8)
    with pytest.raises(IngestionError, match="empty"):
        build_index([], embed=emb)
    with pytest.raises(IngestionError, match="duplicate"):
        build_index([Document("a", "x"), Document("a", "y")], embed=emb)
    with pytest.raises(IngestionError, match="'b'"):
        build_index([Document("a", "x", title="t"), Document("b", "y")], KeyStrategy.TITLE, emb)


def test_build_index_starts_at_version_zero():
    store = build_index([Document("a", "x y"), Document("b", "y z")], embed=MockEmbedder(8))
    assert store.versions == (0, 0) and store.epoch == 0
    assert all(not m for m in store.merged)


def test_ties_break_by_ascending_doc_id():
    store = _store([[1.0, 0.0]] * 3, ids=("c", "a", "b"))
    assert retrieve_top_n(store, np.array([1.0, 0.0]), 3).doc_ids == ["a", "b", "c"]


def test_brute_force_matches_full_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n, d = int(rng.integers(1, 12)), int(rng.integers(1, 5))
        # small integers force frequent exact ties
        matrix = rng.integers(-2, 3, size=(n, d)).astype(float)
        ids = [f"doc{j}" for j in rng.permutation(n)]
        q = rng.integers(-2, 3, size=d).astype(float)
        top = int(rng.integers(1, n + 1))
        expected = sorted(range(n), key=lambda i: (-sum(matrix[i, t] * q[t] for t in range(d)), ids[i]))[:top]
        got = retrieve_top_n(_store(matrix, ids), q, top).doc_ids
        assert got == [ids[i] for i in expected]


def test_cosine_ranking_ignores_key_norm():
    store = _store([[10.0, 1.0], [0.5, 0.5]])
    assert retrieve_top_n(store, np.array([1.0, 1.0]), 1, "ip").doc_ids == ["d0"]
    assert retrieve_top_n(store, np.array([1.0, 1.0]), 1, "cosine").doc_ids == ["d1"]


def test_retrieve_rejects_wrong_dim():
    with pytest.raises(ValueError):
        retrieve_top_n(_store([[1.0, 0.0]]), np.ones(3), 1)


def test_bm25_hand_computed_score():
    bm = BM25Index(["a b", "a c c"])
    np.testing.assert_allclose(bm.scores(["c"]), [0.0, 0.902321773509988], rtol=0, atol=1e-12)


def test_bm25_idf_is_non_negative_for_ubiquitous_terms():
    bm = BM25Index(["a b", "a c c"])
    assert bm.idf("a") == pytest.approx(0.1823215567939546, abs=1e-15)
    assert bm.idf("zzz") == pytest.approx(math.log(1 + 2.5 / 0.5))


def test_bm25_doc_score_matches_corpus_scores():
    bm = BM25Index(["x y z", "y y q", "z"])
    for i in range(3):
        assert bm.doc_score(["y", "z"], i) == pytest.approx(bm.scores(["y", "z"])[i])


def test_bm25_retrieve_and_empty_query():
    store = _store(np.ones((3, 2)), texts=["apple pie", "banana bread", "apple apple tart"])
    assert bm25_retrieve(store, "apple", 2).doc_ids == ["d2", "d0"]
    with pytest.raises(ValueError):
        bm25_retrieve(store, "  ", 2)


def test_key_store_is_immutable_snapshot():
    store = _store([[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        store.matrix[0, 0] = 5.0
    new = store.with_updates({"d0": (np.array([2.0, 0.0]), "t", frozenset({"u"}))})
    assert store.matrix[0, 0] == 1.0 and new.matrix[0, 0] == 2.0
    assert new.versions == (1, 0) and new.epoch == 1
    assert new.merged[0] == {"u"}
    with pytest.raises(ValueError, match="grow"):
        new.with_updates({"d0": (np.array([2.0, 0.0]), "t", frozenset())})


def test_key_store_validation():
    with pytest.raises(ValueError):
        _store(np.zeros((0, 2)))
    with pytest.raises(IngestionError):
        _store([[1.0], [2.0]], ids=("a", "a"))


def test_ranked_list_helpers():
    r = RankedList((("a", 2.0), ("b", 1.0)))
    assert r.top(1) == ["a"] and r.scores == [2.0, 1.0] and len(r) == 2
