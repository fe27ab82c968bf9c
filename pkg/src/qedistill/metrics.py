"""Ranking metrics: nDCG@k with graded relevance, MAP and MRR under binary
relevance with a grade threshold.

Conventions follow standard TREC practice: unjudged retrieved documents
count as grade 0, and the ideal DCG ranks all judged documents for the
query (truncated at the cutoff).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .bm25 import RankedList
from .trec import Qrels


class UnjudgedQueryError(Exception):
    """The query has no judgments at all; it must be excluded, not scored 0."""


@dataclass(frozen=True)
class MetricConfig:
    ndcg_cutoff: int = 10
    binary_threshold: int = 2
    ndcg_gain: str = "linear"  # "linear" or "exponential"

    def __post_init__(self):
        if self.ndcg_cutoff < 1:
            raise ValueError("ndcg_cutoff must be >= 1")
        if self.binary_threshold < 1:
            raise ValueError("binary_threshold must be >= 1")
        if self.ndcg_gain not in ("linear", "exponential"):
            raise ValueError(f"unknown ndcg_gain: {self.ndcg_gain!r}")


@dataclass
class QueryMetrics:
    ndcg: float
    ap: float | None  # None when the query has no relevant docs under the threshold
    mrr: float


@dataclass
class EvalResult:
    per_query: dict[str, QueryMetrics]
    mean_ndcg: float
    mean_ap: float
    mean_mrr: float
    skipped: list[str] = field(default_factory=list)


def _gain(grade: int, mode: str) -> float:
    if mode == "linear":
        return float(grade)
    return float(2**grade - 1)


def _require_judged(ranked: RankedList, judged: dict[str, int]) -> None:
    if not judged:
        raise UnjudgedQueryError(f"query {ranked.query_id!r} has no judgments")


def ndcg_at_k(ranked: RankedList, qrels: Qrels, config: MetricConfig = MetricConfig()) -> float:
    judged = qrels.judged_docs(ranked.query_id)
    _require_judged(ranked, judged)
    k = config.ndcg_cutoff
    dcg = 0.0
    for i, (doc_id, _) in enumerate(ranked.entries[:k], start=1):
        dcg += _gain(judged.get(doc_id, 0), config.ndcg_gain) / math.log2(i + 1)
    ideal = sorted(judged.values(), reverse=True)
    idcg = 0.0
    for i, grade in enumerate(ideal[:k], start=1):
        idcg += _gain(grade, config.ndcg_gain) / math.log2(i + 1)
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def average_precision(
    ranked: RankedList, qrels: Qrels, config: MetricConfig = MetricConfig()
) -> float | None:
    """AP under binary relevance (grade >= threshold); None when R == 0."""
    judged = qrels.judged_docs(ranked.query_id)
    _require_judged(ranked, judged)
    relevant = {d for d, g in judged.items() if g >= config.binary_threshold}
    if not relevant:
        return None
    hits = 0
    precision_sum = 0.0
    for i, (doc_id, _) in enumerate(ranked.entries, start=1):
        if doc_id in relevant:
            hits += 1
            precision_sum += hits / i
    return precision_sum / len(relevant)


def mrr(ranked: RankedList, qrels: Qrels, config: MetricConfig = MetricConfig()) -> float:
    """Reciprocal rank of the first relevant retrieved doc; 0 if none."""
    judged = qrels.judged_docs(ranked.query_id)
    _require_judged(ranked, judged)
    for i, (doc_id, _) in enumerate(ranked.entries, start=1):
        if judged.get(doc_id, 0) >= config.binary_threshold:
            return 1.0 / i
    return 0.0


def evaluate_run(
    run: list[RankedList], qrels: Qrels, config: MetricConfig = MetricConfig()
) -> EvalResult:
    """Per-query metrics plus arithmetic means.

    Queries without judgments are excluded from all means and listed in
    `skipped`. Queries judged but with no relevant doc under the binary
    threshold are excluded from the MAP mean only.
    """
    per_query: dict[str, QueryMetrics] = {}
    skipped: list[str] = []
    for ranked in run:
        try:
            per_query[ranked.query_id] = QueryMetrics(
                ndcg=ndcg_at_k(ranked, qrels, config),
                ap=average_precision(ranked, qrels, config),
                mrr=mrr(ranked, qrels, config),
            )
        except UnjudgedQueryError:
            skipped.append(ranked.query_id)
    ndcgs = [m.ndcg for m in per_query.values()]
    aps = [m.ap for m in per_query.values() if m.ap is not None]
    mrrs = [m.mrr for m in per_query.values()]
    return EvalResult(
        per_query=per_query,
        mean_ndcg=sum(ndcgs) / len(ndcgs) if ndcgs else 0.0,
        mean_ap=sum(aps) / len(aps) if aps else 0.0,
        mean_mrr=sum(mrrs) / len(mrrs) if mrrs else 0.0,
        skipped=skipped,
    )
