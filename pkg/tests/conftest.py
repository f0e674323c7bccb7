import pytest

from erm.estimator import EvolvingRetrievalMemory
from erm.synthetic import make_planted_corpus

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    return make_planted_corpus(n_docs=80, n_queries=60, n_intents=15, seed=3)


@pytest.fixture
def fitted(small_corpus):
    docs, queries = small_corpus
    return EvolvingRetrievalMemory(embed_dim=64, seed=3).fit(queries[:30], corpus=docs)
