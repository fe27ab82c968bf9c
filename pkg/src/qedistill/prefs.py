"""Preference pair construction from expansion records and retrieval feedback.

Both expansions of a query are composed with it, retrieved, and scored
with nDCG@10; pairs survive only when the score gap reaches the margin
threshold, with the higher-scoring expansion as chosen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .bm25 import Bm25Params, compose_query, search
from .expansion import ExpansionRecord
from .index import InvertedIndex
from .metrics import MetricConfig, UnjudgedQueryError, ndcg_at_k
from .prompts import build_prompt, render_prompt
from .trec import Qrels


@dataclass(frozen=True)
class PrefBuildConfig:
    delta: float = 0.01
    retrieval_k: int = 1000
    bm25: Bm25Params = Bm25Params()
    metric: MetricConfig = MetricConfig()

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass
class PreferencePair:
    query_id: str
    prompt: str  # zero-shot formatted input, no exemplars
    chosen: str
    rejected: str
    chosen_score: float
    rejected_score: float


@dataclass
class PairReportEntry:
    query_id: str
    s1: float | None
    s2: float | None
    kept: bool
    reason: str  # "kept", "below-margin", "tie", "both-zero", "no-judgments"


@dataclass
class PairReport:
    entries: list[PairReportEntry] = field(default_factory=list)
    kept: int = 0
    skipped: int = 0


def score_expansion_pair(
    record: ExpansionRecord,
    index: InvertedIndex,
    qrels: Qrels,
    cfg: PrefBuildConfig = PrefBuildConfig(),
) -> tuple[float, float]:
    """nDCG@10 of the query composed with e1 and with e2, respectively."""
    scores = []
    for expansion in (record.e1, record.e2):
        ranked = search(
            index, cfg.bm25, compose_query(record.query, expansion), cfg.retrieval_k
        )
        ranked.query_id = record.query_id
        scores.append(ndcg_at_k(ranked, qrels, cfg.metric))
    return scores[0], scores[1]


def build_pairs(
    records: list[ExpansionRecord],
    index: InvertedIndex,
    qrels: Qrels,
    cfg: PrefBuildConfig = PrefBuildConfig(),
) -> tuple[list[PreferencePair], int, PairReport]:
    """Apply the margin rule to every record; returns (pairs, skipped, report).

    A record is kept when |s1 - s2| >= delta (ties at exactly delta are
    kept). Records where both expansions score 0 carry no ordering signal
    and are skipped regardless of delta, as are exact score ties.
    """
    pairs: list[PreferencePair] = []
    report = PairReport()
    for record in records:
        try:
            s1, s2 = score_expansion_pair(record, index, qrels, cfg)
        except UnjudgedQueryError:
            report.entries.append(
                PairReportEntry(record.query_id, None, None, False, "no-judgments")
            )
            report.skipped += 1
            continue
        if s1 == s2 == 0.0:
            reason = "both-zero"
        elif s1 == s2:
            reason = "tie"
        elif abs(s1 - s2) >= cfg.delta:
            reason = "kept"
        else:
            reason = "below-margin"
        report.entries.append(
            PairReportEntry(record.query_id, s1, s2, reason == "kept", reason)
        )
        if reason != "kept":
            report.skipped += 1
            continue
        report.kept += 1
        chosen, rejected = (record.e1, record.e2) if s1 > s2 else (record.e2, record.e1)
        chosen_score, rejected_score = max(s1, s2), min(s1, s2)
        system, user = build_prompt(record.query, "zero")
        pairs.append(
            PreferencePair(
                query_id=record.query_id,
                prompt=render_prompt(system, user),
                chosen=chosen,
                rejected=rejected,
                chosen_score=chosen_score,
                rejected_score=rejected_score,
            )
        )
    return pairs, report.skipped, report


def write_pairs(pairs: list[PreferencePair], path) -> None:
    with open(path, "w", encoding="utf-8") as out:
        for p in pairs:
            out.write(
                json.dumps(
                    {
                        "query_id": p.query_id,
                        "prompt": p.prompt,
                        "chosen": p.chosen,
                        "rejected": p.rejected,
                        "chosen_score": p.chosen_score,
                        "rejected_score": p.rejected_score,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_pairs(path) -> list[PreferencePair]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            pairs.append(PreferencePair(**obj))
    return pairs


def write_pair_report(report: PairReport, path) -> None:
    with open(path, "w", encoding="utf-8") as out:
        json.dump(
            {
                "kept": report.kept,
                "skipped": report.skipped,
                "records": [
                    {
                        "query_id": e.query_id,
                        "s1": e.s1,
                        "s2": e.s2,
                        "kept": e.kept,
                        "reason": e.reason,
                    }
                    for e in report.entries
                ],
            },
            out,
            indent=2,
        )
