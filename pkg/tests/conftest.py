import numpy as np
import pytest

from qedistill.analysis import AnalyzerConfig
from qedistill.index import Document, build_index

WORDS = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf",
    "hotel", "india", "juliet", "kilo", "lima", "mike", "november",
    "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform",
    "victor", "whiskey", "xray", "yankee", "zulu",
]


def random_corpus(rng: np.random.Generator, n_docs: int, min_len=3, max_len=30):
    docs = []
    for i in range(n_docs):
        length = int(rng.integers(min_len, max_len + 1))
        words = [WORDS[int(j)] for j in rng.integers(0, len(WORDS), length)]
        docs.append(Document(f"d{i:04d}", " ".join(words)))
    return docs


@pytest.fixture
def plain_analyzer():
    return AnalyzerConfig(stemmer="none")


@pytest.fixture
def small_index(plain_analyzer):
    rng = np.random.Generator(np.random.PCG64(7))
    return build_index(random_corpus(rng, 200), plain_analyzer)
