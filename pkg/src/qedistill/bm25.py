"""BM25 scoring and ranked retrieval over an inverted index.

The scoring function is the Lucene-flavored variant:

    score(q, d) = sum over query term occurrences t of
        idf(t) * tf / (tf + k1 * (1 - b + b * dl / avgdl))
    idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))

Duplicate query terms are occurrence-additive: each occurrence contributes
its own idf * tf_norm term.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .analysis import analyze
from .index import InvertedIndex

QUERY_REPEATS = 5


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 0.9
    b: float = 0.4

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


@dataclass
class RankedList:
    """Retrieval output for one query: (doc_id, score) descending by score,
    ties broken by doc_id ascending."""

    query_id: str
    entries: list[tuple[str, float]]

    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.entries]


def compose_query(q: str, expansion: str) -> str:
    """Join the original query repeated five times with the expansion text."""
    if not q:
        raise ValueError("cannot compose an empty query")
    parts = [q] * QUERY_REPEATS
    if expansion:
        parts.append(expansion)
    return " ".join(parts)


def idf(index: InvertedIndex, term: str) -> float:
    df = index.doc_frequency(term)
    if df == 0:
        return 0.0
    n = index.doc_count
    return math.log(1.0 + (n - df + 0.5) / (df + 0.5))


def bm25_score(
    index: InvertedIndex,
    params: Bm25Params,
    query_terms: list[str],
    doc_id: str,
) -> float:
    """Score one document against an analyzed query term list."""
    if doc_id not in index.doc_lengths:
        raise KeyError(f"unknown doc_id: {doc_id!r}")
    dl = index.doc_lengths[doc_id]
    avgdl = index.avg_doc_length
    norm = params.k1 * (1.0 - params.b + params.b * dl / avgdl)
    score = 0.0
    for term, q_count in Counter(query_terms).items():
        tf = 0
        for d, f in index.postings.get(term, ()):
            if d == doc_id:
                tf = f
                break
        if tf == 0:
            continue
        score += q_count * idf(index, term) * tf / (tf + norm)
    return score


def search(
    index: InvertedIndex,
    params: Bm25Params,
    query: str,
    k: int = 1000,
) -> RankedList:
    """Top-k documents for `query`; empty analyzed queries return no hits."""
    return _search_terms(index, params, analyze(query, index.analyzer), "", k)


def _search_terms(
    index: InvertedIndex,
    params: Bm25Params,
    terms: list[str],
    query_id: str,
    k: int,
) -> RankedList:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not terms or index.doc_count == 0:
        return RankedList(query_id=query_id, entries=[])
    n = index.doc_count
    avgdl = index.avg_doc_length
    k1, b = params.k1, params.b
    accum: dict[str, float] = {}
    for term, q_count in Counter(terms).items():
        plist = index.postings.get(term)
        if not plist:
            continue
        df = len(plist)
        w = q_count * math.log(1.0 + (n - df + 0.5) / (df + 0.5))
        for doc_id, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_lengths[doc_id] / avgdl)
            accum[doc_id] = accum.get(doc_id, 0.0) + w * tf / (tf + norm)
    ranked = sorted(accum.items(), key=lambda item: (-item[1], item[0]))
    return RankedList(query_id=query_id, entries=ranked[:k])


def batch_search(
    index: InvertedIndex,
    params: Bm25Params,
    queries: list[tuple[str, str]],
    k: int = 1000,
) -> list[RankedList]:
    """Search each (query_id, text) pair; output order matches input order."""
    seen = set()
    for qid, _ in queries:
        if qid in seen:
            raise ValueError(f"duplicate query_id: {qid!r}")
        seen.add(qid)
    results = []
    for qid, text in queries:
        ranked = search(index, params, text, k)
        ranked.query_id = qid
        results.append(ranked)
    return results
