"""Synthetic retrieval benchmark generator.

Builds a corpus with deliberate query/document vocabulary mismatch: each
topic has "surface" terms that appear in its queries and "deep" terms
that dominate its relevant documents, so plain BM25 on the bare query is
weak by construction and an expansion that supplies deep terms moves
nDCG@10 measurably.

Per topic the judged documents are engineered to race closely under
composed queries: graded docs cover different halves of the deep
vocabulary and a surface-heavy near-miss doc is judged 0. Whether an
expansion echoes the query terms then changes rankings for a fair share
of queries, which is what gives the preference-pair margin filter real
signal to work with.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass

import numpy as np

from .analysis import DEFAULT_STOPWORDS


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    n_topics: int = 25
    queries_per_topic: int = 4
    surface_terms: int = 4
    deep_terms: int = 8
    distractor_fraction: float = 0.5
    distractor_deep_terms: int = 8  # wrong-topic deep terms per distractor
    total_docs: int = 1000
    background_vocab: int = 1500


def _make_token(rng: np.random.Generator, taken: set[str]) -> str:
    letters = string.ascii_lowercase
    while True:
        length = int(rng.integers(5, 9))
        token = "".join(letters[i] for i in rng.integers(0, 26, size=length))
        if token not in taken and token not in DEFAULT_STOPWORDS:
            taken.add(token)
            return token


def generate_benchmark(cfg: SyntheticConfig = SyntheticConfig()):
    """Return (docs, queries, qrels_rows) as plain Python structures.

    docs: list of (doc_id, contents); queries: list of (query_id, text);
    qrels_rows: list of (query_id, doc_id, grade).
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    taken: set[str] = set()
    topics = []
    for _ in range(cfg.n_topics):
        topics.append(
            {
                "surface": [_make_token(rng, taken) for _ in range(cfg.surface_terms)],
                "deep": [_make_token(rng, taken) for _ in range(cfg.deep_terms)],
            }
        )
    background = [_make_token(rng, taken) for _ in range(cfg.background_vocab)]

    docs: list[tuple[str, str]] = []
    qrels_rows: list[tuple[str, str, int]] = []
    topic_docs: list[list[tuple[str, int]]] = []
    doc_counter = 0

    def noise_words(upper: int) -> list[str]:
        n = int(rng.integers(0, upper + 1))
        return [background[int(i)] for i in rng.integers(0, len(background), n)]

    def add_doc(words: list[str]) -> str:
        nonlocal doc_counter
        doc_id = f"d{doc_counter:04d}"
        doc_counter += 1
        perm = rng.permutation(len(words))
        docs.append((doc_id, " ".join(words[i] for i in perm)))
        return doc_id

    for t, topic in enumerate(topics):
        surface, deep = topic["surface"], topic["deep"]
        half_a, half_b = deep[: len(deep) // 2], deep[len(deep) // 2 :]
        graded: list[tuple[str, int]] = []

        # Grade 3: full deep coverage plus every surface term once, so the
        # bare query can reach exactly this one relevant doc.
        graded.append((add_doc(deep * 2 + surface + noise_words(2)), 3))
        # Grades 2 and 1-2: deep halves with no surface terms at all; only
        # an expansion carrying deep terms can retrieve them.
        graded.append((add_doc(half_a * 3 + noise_words(4)), 2))
        grade = int(rng.integers(1, 3))
        graded.append((add_doc(half_b * 3 + noise_words(4)), grade))
        # Cross-topic distractor for a fraction of topics: so surface-heavy
        # that it wins bare-query retrieval, but its deep content belongs to
        # another topic. Teacher passages sourced from it are confidently
        # wrong, which is what the preference stage is there to catch.
        if rng.random() < cfg.distractor_fraction:
            other = topics[(t + 1) % cfg.n_topics]
            words = list(other["deep"][: cfg.distractor_deep_terms])
            for s in surface:
                words += [s] * int(rng.integers(3, 5))
            graded.append((add_doc(words + noise_words(4)), 0))
        topic_docs.append(graded)

    while len(docs) < cfg.total_docs:
        length = int(rng.integers(20, 41))
        add_doc([background[int(i)] for i in rng.integers(0, len(background), length)])

    queries: list[tuple[str, str]] = []
    query_counter = 0
    for t, topic in enumerate(topics):
        surface = topic["surface"]
        triples = [
            (a, b, c)
            for a in surface
            for b in surface
            for c in surface
            if len({a, b, c}) == 3
        ]
        order = rng.permutation(len(triples))
        for j in range(cfg.queries_per_topic):
            a, b, c = triples[order[j % len(triples)]]
            qid = f"q{query_counter:03d}"
            query_counter += 1
            queries.append((qid, f"{a} {b} {c}"))
            for doc_id, grade in topic_docs[t]:
                qrels_rows.append((qid, doc_id, grade))

    return docs, queries, qrels_rows


def write_benchmark(cfg: SyntheticConfig, corpus_path, queries_path, qrels_path) -> dict:
    """Generate and write corpus.jsonl, queries.tsv and qrels.txt."""
    docs, queries, qrels_rows = generate_benchmark(cfg)
    with open(corpus_path, "w", encoding="utf-8") as out:
        for doc_id, contents in docs:
            out.write(json.dumps({"id": doc_id, "contents": contents}) + "\n")
    with open(queries_path, "w", encoding="utf-8") as out:
        for qid, text in queries:
            out.write(f"{qid}\t{text}\n")
    with open(qrels_path, "w", encoding="utf-8") as out:
        for qid, doc_id, grade in qrels_rows:
            out.write(f"{qid} 0 {doc_id} {grade}\n")
    return {"docs": len(docs), "queries": len(queries), "judgments": len(qrels_rows)}
