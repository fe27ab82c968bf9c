"""TREC qrels and run file parsing/writing."""

from __future__ import annotations

from dataclasses import dataclass, field

from .bm25 import RankedList


class TrecFormatError(Exception):
    pass


@dataclass
class Qrels:
    """Relevance judgments: (query_id, doc_id) -> non-negative grade."""

    judgments: dict[tuple[str, str], int] = field(default_factory=dict)

    def grade(self, query_id: str, doc_id: str) -> int:
        # Unjudged documents count as grade 0.
        return self.judgments.get((query_id, doc_id), 0)

    def judged_docs(self, query_id: str) -> dict[str, int]:
        return {
            d: g for (q, d), g in self.judgments.items() if q == query_id
        }

    def query_ids(self) -> list[str]:
        return sorted({q for q, _ in self.judgments})


def parse_qrels(path) -> Qrels:
    """Parse "query_id 0 doc_id grade" lines; duplicate pairs are an error."""
    qrels = Qrels()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise TrecFormatError(
                    f"{path}:{lineno}: expected 4 fields, got {len(fields)}"
                )
            qid, _, doc_id, grade_s = fields
            try:
                grade = int(grade_s)
            except ValueError:
                raise TrecFormatError(
                    f"{path}:{lineno}: non-integer grade {grade_s!r}"
                ) from None
            if grade < 0:
                raise TrecFormatError(f"{path}:{lineno}: negative grade")
            key = (qid, doc_id)
            if key in qrels.judgments:
                raise TrecFormatError(
                    f"{path}:{lineno}: duplicate judgment for {qid} {doc_id}"
                )
            qrels.judgments[key] = grade
    return qrels


def write_run(run: list[RankedList], path, run_tag: str = "qedistill") -> None:
    """Write "query_id Q0 doc_id rank score run_tag" lines, rank from 1."""
    with open(path, "w", encoding="utf-8") as out:
        for ranked in run:
            for rank, (doc_id, score) in enumerate(ranked.entries, start=1):
                out.write(
                    f"{ranked.query_id} Q0 {doc_id} {rank} {score:.6f} {run_tag}\n"
                )


def parse_run(path) -> list[RankedList]:
    """Parse a TREC run file back into per-query ranked lists (input order)."""
    by_qid: dict[str, list[tuple[str, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6:
                raise TrecFormatError(
                    f"{path}:{lineno}: expected 6 fields, got {len(fields)}"
                )
            qid, _, doc_id, _rank, score_s, _tag = fields
            try:
                score = float(score_s)
            except ValueError:
                raise TrecFormatError(
                    f"{path}:{lineno}: non-numeric score {score_s!r}"
                ) from None
            by_qid.setdefault(qid, []).append((doc_id, score))
    return [RankedList(query_id=q, entries=e) for q, e in by_qid.items()]
