import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from erm.similarity import (MockEmbedder, NormBound, SimilarityKind, augment_key, augment_key_many,
                            clip_to_norm, mock_embed, similarity, tokenize)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec8 = arrays(np.float64, 8, elements=finite)


@pytest.mark.parametrize("alias,kind", [("ip", SimilarityKind.INNER_PRODUCT), ("dot", SimilarityKind.INNER_PRODUCT),
                                        ("inner_product", SimilarityKind.INNER_PRODUCT),
                                        ("cos", SimilarityKind.COSINE), ("COSINE", SimilarityKind.COSINE)])
def test_parse_aliases(alias, kind):
    assert SimilarityKind.parse(alias) is kind


def test_parse_rejects_unknown():
    with pytest.raises(ValueError):
        SimilarityKind.parse("euclid")


def test_only_inner_product_is_exact():
    assert SimilarityKind.INNER_PRODUCT.exact_for_evolution
    assert not SimilarityKind.COSINE.exact_for_evolution


def test_known_values():
    a, b = np.array([1.0, 2.0, 0.0]), np.array([3.0, -1.0, 4.0])
    assert similarity(a, b) == 1.0
    assert similarity(a, b, "cosine") == pytest.approx(1.0 / (np.sqrt(5) * np.sqrt(26)))
    assert similarity(a, a, "cosine") == pytest.approx(1.0, abs=1e-15)


def test_cosine_zero_vector_raises():
    with pytest.raises(ValueError, match="zero"):
        similarity(np.zeros(3), np.ones(3), "cosine")


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        similarity(np.ones(3), np.ones(4))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        similarity(np.array([np.nan, 1.0]), np.ones(2))


@given(vec8, vec8, vec8)
def test_inner_product_is_bilinear(q, e, k):
    lhs = similarity(q + e, k)
    assert lhs == pytest.approx(similarity(q, k) + similarity(e, k), abs=1e-9)


@given(vec8, st.floats(0.01, 5.0))
def test_clip_never_exceeds_bound(v, bound):
    out = clip_to_norm(v, bound)
    assert np.linalg.norm(out) <= bound
    if np.linalg.norm(v) <= bound:
        np.testing.assert_array_equal(out, v)
    else:
        # direction is preserved
        assert np.allclose(out / np.linalg.norm(out), v / np.linalg.norm(v))


@pytest.mark.parametrize("bad", [0.0, -1.0, float("inf"), float("nan")])
def test_norm_bound_must_be_positive_finite(bad):
    with pytest.raises(ValueError):
        NormBound(bad)


def test_augment_is_additive():
    k = np.array([1.0, 0.0])
    np.testing.assert_array_equal(augment_key(k, np.array([0.5, 0.5])), [1.5, 0.5])
    np.testing.assert_array_equal(augment_key_many(k, []), k)
    np.testing.assert_array_equal(augment_key_many(k, [np.ones(2), np.ones(2)]), [3.0, 2.0])


def test_tokenize_lowercases_words():
    assert tokenize("Hello, World_1  x") == ["hello", "world_1", "x"]


def test_mock_embed_is_deterministic_unit_norm():
    a = mock_embed("alpha beta gamma", dim=32, seed=1)
    np.testing.assert_array_equal(a, mock_embed("alpha beta gamma", dim=32, seed=1))
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert not np.allclose(a, mock_embed("alpha beta gamma", dim=32, seed=2))


def test_mock_embed_shared_words_correlate():
    a, b, c = (mock_embed(t, dim=256) for t in ("red apple pie", "red apple tart", "blue sky dream"))
    assert a @ b > a @ c


def test_mock_embed_rejects_empty():
    with pytest.raises(ValueError):
        mock_embed("  ...  ")


def test_embedder_memoizes_read_only():
    emb = MockEmbedder(dim=16)
    v = emb("some text")
    assert emb("some text") is v
    with pytest.raises(ValueError):
        v[0] = 1.0
