"""Representation space kernel: similarity, key augmentation, norm bounding and
a deterministic hashing embedder used for offline experiments."""

from __future__ import annotations

import enum
import hashlib
import re

import numpy as np

from .validation import check_vector

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class SimilarityKind(str, enum.Enum):
    INNER_PRODUCT = "inner_product"
    COSINE = "cosine"

    @classmethod
    def parse(cls, value) -> "SimilarityKind":
        if isinstance(value, cls):
            return value
        aliases = {"ip": cls.INNER_PRODUCT, "dot": cls.INNER_PRODUCT, "cos": cls.COSINE}
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown similarity kind {value!r}") from None

    @property
    def exact_for_evolution(self) -> bool:
        # Additive key evolution is exact only under the inner product; cosine is
        # an approximation that degrades as key norms drift.
        return self is SimilarityKind.INNER_PRODUCT


class NormBound(float):
    """Radius M of the ball that admitted expansion vectors must lie in."""

    def __new__(cls, value: float = 1.0):
        value = float(value)
        if not np.isfinite(value) or value <= 0:
            raise ValueError(f"norm bound must be a positive finite real, got {value}")
        return super().__new__(cls, value)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = check_vector(a, name="a")
    b = check_vector(b, name="b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} != {b.shape[0]}")
    return a, b


def similarity(a, b, kind=SimilarityKind.INNER_PRODUCT) -> float:
    a, b = _pair(a, b)
    kind = SimilarityKind.parse(kind)
    dot = float(np.dot(a, b))
    if kind is SimilarityKind.INNER_PRODUCT:
        return dot
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero-norm operand")
    # rounding can push |cos| a hair past 1
    return float(np.clip(dot / (na * nb), -1.0, 1.0))


def augment_key(key, unit) -> np.ndarray:
    """Additive key augmentation ``key (+) unit = key + unit``."""
    key, unit = _pair(key, unit)
    return key + unit


def augment_key_many(key, units) -> np.ndarray:
    key = check_vector(key, name="key")
    units = list(units)
    if not units:
        return key.copy()
    stacked = np.vstack([check_vector(u, name="unit") for u in units])
    if stacked.shape[1] != key.shape[0]:
        raise ValueError(f"dimension mismatch: {stacked.shape[1]} != {key.shape[0]}")
    return key + stacked.sum(axis=0)


def clip_to_norm(v, bound) -> np.ndarray:
    v = check_vector(v, name="v")
    bound = NormBound(bound)
    norm = float(np.linalg.norm(v))
    if norm <= bound:
        return v.copy()
    out = v * (bound / norm)
    # guard against the scaled norm landing one ulp above the bound
    over = float(np.linalg.norm(out))
    if over > bound:
        out *= bound / over
    return out


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _ngram_vector(gram: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{gram}".encode("utf-8"), digest_size=16).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim)


def mock_embed(text: str, dim: int = 128, seed: int = 0, ngram: int = 2) -> np.ndarray:
    """Hash token n-grams (n = 1..ngram) to Gaussian directions, sum, normalize.

    Deterministic in ``(text, dim, seed)``; texts sharing tokens get correlated
    vectors, unrelated texts are nearly orthogonal for large ``dim``.
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    tokens = tokenize(text or "")
    if not tokens:
        raise ValueError("cannot embed empty text")
    acc = np.zeros(dim)
    for n in range(1, ngram + 1):
        for i in range(len(tokens) - n + 1):
            acc += _ngram_vector(" ".join(tokens[i:i + n]), dim, seed)
    norm = np.linalg.norm(acc)
    if norm == 0.0:  # pragma: no cover - needs an exact Gaussian cancellation
        raise ValueError("degenerate embedding")
    return acc / norm


class MockEmbedder:
    """Callable wrapper around :func:`mock_embed` with memoization."""

    def __init__(self, dim: int = 128, seed: int = 0, ngram: int = 2):
        self.dim = dim
        self.seed = seed
        self.ngram = ngram
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            vec = mock_embed(text, self.dim, self.seed, self.ngram)
            vec.setflags(write=False)
            self._cache[text] = vec
        return vec

    def __repr__(self) -> str:
        return f"MockEmbedder(dim={self.dim}, seed={self.seed}, ngram={self.ngram})"
