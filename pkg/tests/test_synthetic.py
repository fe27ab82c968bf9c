import numpy as np

from qedistill.analysis import DEFAULT_STOPWORDS, AnalyzerConfig, analyze
from qedistill.synthetic import SyntheticConfig, generate_benchmark, write_benchmark


def test_sizes_match_config():
    cfg = SyntheticConfig(seed=0)
    docs, queries, qrels_rows = generate_benchmark(cfg)
    assert len(docs) == cfg.total_docs
    assert len(queries) == cfg.n_topics * cfg.queries_per_topic
    assert len({d for d, _ in docs}) == len(docs)
    assert len({q for q, _ in queries}) == len(queries)


def test_deterministic_given_seed():
    a = generate_benchmark(SyntheticConfig(seed=5))
    b = generate_benchmark(SyntheticConfig(seed=5))
    assert a == b
    c = generate_benchmark(SyntheticConfig(seed=6))
    assert a != c


def test_every_query_has_relevant_judgments():
    docs, queries, qrels_rows = generate_benchmark(SyntheticConfig(seed=1))
    doc_ids = {d for d, _ in docs}
    judged = {}
    for qid, doc_id, grade in qrels_rows:
        assert doc_id in doc_ids
        judged.setdefault(qid, []).append(grade)
    for qid, _ in queries:
        grades = judged[qid]
        assert max(grades) >= 2  # at least one binary-relevant doc
    assert {g for gs in judged.values() for g in gs} <= {0, 1, 2, 3}


def test_vocabulary_avoids_stopwords_and_survives_analysis():
    docs, queries, _ = generate_benchmark(SyntheticConfig(seed=2, total_docs=200))
    analyzer = AnalyzerConfig(stemmer="none")
    for _, text in queries:
        tokens = analyze(text, analyzer)
        assert tokens == text.split()
        assert not set(tokens) & DEFAULT_STOPWORDS


def test_queries_have_vocabulary_mismatch_with_most_relevant_docs():
    # Only the grade-3 doc carries surface terms; the other graded docs of
    # a topic must share no vocabulary with the query.
    docs, queries, qrels_rows = generate_benchmark(SyntheticConfig(seed=3))
    contents = dict(docs)
    by_query = {}
    for qid, doc_id, grade in qrels_rows:
        by_query.setdefault(qid, []).append((doc_id, grade))
    for qid, text in queries[:20]:
        qterms = set(text.split())
        overlaps = [
            bool(qterms & set(contents[d].split()))
            for d, g in by_query[qid]
            if g in (1, 2)
        ]
        assert not any(overlaps)


def test_write_benchmark_files(tmp_path):
    stats = write_benchmark(
        SyntheticConfig(seed=0, total_docs=150, n_topics=5),
        tmp_path / "corpus.jsonl",
        tmp_path / "queries.tsv",
        tmp_path / "qrels.txt",
    )
    assert stats["docs"] == 150
    assert len((tmp_path / "corpus.jsonl").read_text().splitlines()) == 150
    assert len((tmp_path / "queries.tsv").read_text().splitlines()) == stats["queries"]
    assert (
        len((tmp_path / "qrels.txt").read_text().splitlines()) == stats["judgments"]
    )
