"""Teacher expansion generation: remote chat API or offline toy teacher.

Every query gets two passages: e1 from the zero-shot prompt and e2 from
the few-shot prompt. Outputs are normalized to single-line text and
truncated to 128 whitespace tokens before storage.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import requests

from .bm25 import Bm25Params, search
from .index import InvertedIndex
from .prompts import build_prompt

log = logging.getLogger(__name__)

MAX_EXPANSION_TOKENS = 128
TOY_PASSAGE_WORDS = 64


class TeacherError(Exception):
    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


@dataclass(frozen=True)
class TeacherEndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str = "TEACHER_API_KEY"  # key comes from the environment only
    max_retries: int = 3
    timeout: float = 60.0
    backoff_seconds: float = 0.5


@dataclass
class ExpansionRecord:
    query_id: str
    query: str
    e1: str  # zero-shot expansion
    e2: str  # few-shot expansion


def normalize_expansion(text: str) -> str:
    """Collapse all whitespace (newlines, tabs, CRs) to single spaces."""
    return " ".join(text.split())


def truncate_tokens(text: str, limit: int = MAX_EXPANSION_TOKENS) -> str:
    return " ".join(text.split()[:limit])


def fetch_expansion(cfg: TeacherEndpointConfig, prompt: tuple[str, str]) -> str:
    """POST a chat-style request and return the normalized completion.

    Retries with exponential backoff on transport errors and non-2xx
    responses, up to cfg.max_retries retries (max_retries + 1 attempts).
    """
    system, user = prompt
    payload = {
        "model": cfg.model_name,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
    }
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(cfg.api_key_env)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    attempts = 0
    last_status: int | None = None
    last_error = "no attempts made"
    while attempts <= cfg.max_retries:
        if attempts > 0:
            time.sleep(cfg.backoff_seconds * 2 ** (attempts - 1))
        attempts += 1
        try:
            resp = requests.post(
                cfg.base_url, json=payload, headers=headers, timeout=cfg.timeout
            )
        except requests.RequestException as exc:
            last_status, last_error = None, str(exc)
            continue
        last_status = resp.status_code
        if resp.status_code // 100 != 2:
            last_error = f"HTTP {resp.status_code}"
            continue
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TeacherError(
                f"malformed completion response: {exc}",
                status=resp.status_code,
                attempts=attempts,
            ) from exc
        text = normalize_expansion(content)
        if not text:
            raise TeacherError(
                "empty completion", status=resp.status_code, attempts=attempts
            )
        return text
    raise TeacherError(
        f"teacher request failed after {attempts} attempts: {last_error}",
        status=last_status,
        attempts=attempts,
    )


def _doc_terms_by_weight(index: InvertedIndex, doc_id: str) -> list[str]:
    weighted = []
    for term, plist in index.postings.items():
        for d, tf in plist:
            if d == doc_id:
                weighted.append((-tf, term))
                break
    weighted.sort()
    return [t for _, t in weighted]


def toy_teacher(
    q: str,
    index: InvertedIndex,
    mode: str,
    params: Bm25Params = Bm25Params(),
    echo_repeats: int = 1,
) -> str:
    """Deterministic offline teacher: a passage built from the top-1 doc.

    Both modes share the same passage (top-doc terms, most frequent first,
    cycled to the word budget); few mode additionally prepends the query
    words, making the expansion strictly more lexically matched to the
    query. `echo_repeats` controls how many times the query is prepended,
    i.e. how strong that lexical-match knob is. Output length stays within
    [1, 100] words.
    """
    if mode not in ("zero", "few"):
        raise ValueError(f"unknown teacher mode: {mode!r}")
    if echo_repeats < 1:
        raise ValueError("echo_repeats must be >= 1")
    hits = search(index, params, q, k=1)
    if not hits.entries:
        return normalize_expansion(q)
    terms = _doc_terms_by_weight(index, hits.entries[0][0])
    if not terms:
        return normalize_expansion(q)
    passage = [terms[i % len(terms)] for i in range(TOY_PASSAGE_WORDS)]
    words = q.split() * echo_repeats + passage if mode == "few" else passage
    return " ".join(words[:100])


ExpansionSource = Callable[[str, str], str]


def api_source(
    cfg: TeacherEndpointConfig, instruction: str | None = None
) -> ExpansionSource:
    return lambda q, mode: fetch_expansion(cfg, build_prompt(q, mode, instruction))


def toy_source(
    index: InvertedIndex,
    params: Bm25Params = Bm25Params(),
    echo_repeats: int = 1,
) -> ExpansionSource:
    return lambda q, mode: toy_teacher(q, index, mode, params, echo_repeats)


def read_expansion_records(path) -> list[ExpansionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(
                ExpansionRecord(
                    query_id=obj["query_id"],
                    query=obj["query"],
                    e1=truncate_tokens(normalize_expansion(obj["e1"])),
                    e2=truncate_tokens(normalize_expansion(obj["e2"])),
                )
            )
    return records


def generate_dataset(
    queries: list[tuple[str, str]],
    source: ExpansionSource,
    out_path,
    concurrency: int = 4,
) -> tuple[int, int]:
    """Write one ExpansionRecord JSON line per query; returns (written, failed).

    Resumable: query_ids already present in `out_path` are skipped. Per-query
    failures are logged and counted; generation continues. Up to `concurrency`
    queries are generated in parallel, but writes happen on this thread in
    input order, so the output file is deterministic for a deterministic
    source.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    done: set[str] = set()
    if os.path.exists(out_path):
        for record in read_expansion_records(out_path):
            done.add(record.query_id)
    todo = [(qid, text) for qid, text in queries if qid not in done]

    def fetch_both(text: str) -> tuple[str, str]:
        return (
            truncate_tokens(source(text, "zero")),
            truncate_tokens(source(text, "few")),
        )

    written = failed = 0
    with open(out_path, "a", encoding="utf-8") as out:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            futures = [(qid, text, pool.submit(fetch_both, text)) for qid, text in todo]
            for qid, text, future in futures:
                try:
                    e1, e2 = future.result()
                except Exception as exc:
                    log.warning("expansion failed for query %s: %s", qid, exc)
                    failed += 1
                    continue
                out.write(
                    json.dumps(
                        {"query_id": qid, "query": text, "e1": e1, "e2": e2},
                        ensure_ascii=False,
                    )
                    + "\n"
                )
                written += 1
    return written, failed
