"""Planted-gap corpora: queries share only a little vocabulary with their gold
document, so raw query embeddings sit far from the gold key, while gold-aware
expansion units point straight at it."""

from __future__ import annotations

import numpy as np

from .index import Document, QueryRecord


def make_planted_corpus(n_docs: int = 500, n_queries: int = 200, n_intents: int = 50, seed: int = 0,
                        doc_tokens: int = 8, shared_tokens: int = 2, jargon_tokens: int = 3,
                        paraphrase_tokens: int = 2, intent_alpha: float | None = None):
    """Return ``(documents, queries)``.

    Every query belongs to one intent; an intent is tied to one gold document and
    a private jargon vocabulary that never appears in the corpus. A query is
    ``shared_tokens`` words drawn from its gold document, the intent's jargon and
    a few paraphrase-only words. Intents are assigned round-robin, or with Zipf
    popularity when ``intent_alpha`` is given.
    """
    if n_intents > n_docs:
        raise ValueError("more intents than documents")
    rng = np.random.default_rng(seed)
    docs = []
    doc_words = []
    for i in range(n_docs):
        words = [f"d{i}w{k}" for k in range(doc_tokens)]
        doc_words.append(words)
        half = doc_tokens // 2
        docs.append(Document(
            doc_id=f"doc{i:04d}",
            text=" ".join(words),
            title=" ".join(words[:half]),
            abstract=" ".join(words[half:]),
            keywords=tuple(words[::2]),
        ))
    gold_index = rng.choice(n_docs, size=n_intents, replace=False)
    if intent_alpha is None:
        assignment = np.arange(n_queries) % n_intents
        rng.shuffle(assignment)
    else:
        p = np.arange(1, n_intents + 1, dtype=float) ** -intent_alpha
        assignment = rng.choice(n_intents, size=n_queries, p=p / p.sum())
    queries = []
    for qi, intent in enumerate(assignment):
        g = int(gold_index[intent])
        shared = list(rng.choice(doc_words[g], size=shared_tokens, replace=False))
        jargon = [f"i{intent}j{k}" for k in range(jargon_tokens)]
        para = [f"q{qi}p{k}" for k in range(paraphrase_tokens)]
        words = shared + jargon + para
        rng.shuffle(words)
        queries.append(QueryRecord(
            query_id=f"q{qi:04d}",
            text=" ".join(words),
            gold_doc_ids=frozenset({docs[g].doc_id}),
            answer=docs[g].title,
        ))
    return docs, queries
