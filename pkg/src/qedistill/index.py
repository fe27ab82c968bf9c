"""Inverted index construction and single-file binary persistence."""

from __future__ import annotations

import io
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .analysis import AnalyzerConfig, analyze

MAGIC = b"QXIDX\x00"
END_MAGIC = b"QXEND\x00"
FORMAT_VERSION = 1


class IndexError_(Exception):
    """Base error for index construction and persistence."""


class DuplicateDocumentError(IndexError_):
    pass


class CorruptIndexError(IndexError_):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    contents: str

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")


@dataclass
class InvertedIndex:
    """Term postings plus the per-document statistics BM25 needs.

    Postings lists are sorted by doc_id ascending with no duplicates;
    instances are treated as immutable once built.
    """

    analyzer: AnalyzerConfig
    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_lengths: dict[str, int] = field(default_factory=dict)

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avg_doc_length(self) -> float:
        n = len(self.doc_lengths)
        if n == 0:
            return 0.0
        return sum(self.doc_lengths.values()) / n

    def doc_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))


def build_index(
    docs: Iterable[Document], config: AnalyzerConfig = AnalyzerConfig()
) -> InvertedIndex:
    """Build an index over `docs`; duplicate doc_ids are an error."""
    doc_lengths: dict[str, int] = {}
    term_postings: dict[str, dict[str, int]] = {}
    for doc in docs:
        if doc.doc_id in doc_lengths:
            raise DuplicateDocumentError(f"duplicate doc_id: {doc.doc_id!r}")
        terms = analyze(doc.contents, config)
        doc_lengths[doc.doc_id] = len(terms)
        for term, tf in Counter(terms).items():
            term_postings.setdefault(term, {})[doc.doc_id] = tf

    # Deterministic layout regardless of ingest order.
    index = InvertedIndex(analyzer=config)
    index.doc_lengths = dict(sorted(doc_lengths.items()))
    index.postings = {
        term: sorted(by_doc.items())
        for term, by_doc in sorted(term_postings.items())
    }
    return index


def read_corpus_jsonl(path) -> Iterator[Document]:
    """Yield Documents from a JSON-lines file with "id" and "contents" fields."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc_id, contents = obj["id"], obj["contents"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IndexError_(f"{path}:{lineno}: bad corpus line ({exc})") from exc
            yield Document(doc_id=str(doc_id), contents=str(contents))


# ---------------------------------------------------------------------------
# Binary file format (version 1, little-endian):
#   MAGIC, u32 version
#   analyzer: u8 lowercase, u8 stemmer(0=none,1=porter),
#             u32 stopword count, stopwords as length-prefixed UTF-8
#   u64 doc count, per doc: length-prefixed doc_id, u64 token count
#   u64 term count, per term: length-prefixed term, u64 posting count,
#             per posting: u64 doc index (into the doc table), u32 tf
#   END_MAGIC
# ---------------------------------------------------------------------------

_STEMMER_CODES = {"none": 0, "porter": 1}
_STEMMER_NAMES = {v: k for k, v in _STEMMER_CODES.items()}


def _write_str(out: io.BufferedWriter, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def save_index(index: InvertedIndex, path) -> None:
    doc_ids = sorted(index.doc_lengths)
    doc_pos = {d: i for i, d in enumerate(doc_ids)}
    with open(path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<I", FORMAT_VERSION))
        out.write(struct.pack("<BB", int(index.analyzer.lowercase),
                              _STEMMER_CODES[index.analyzer.stemmer]))
        stopwords = sorted(index.analyzer.stopwords)
        out.write(struct.pack("<I", len(stopwords)))
        for w in stopwords:
            _write_str(out, w)
        out.write(struct.pack("<Q", len(doc_ids)))
        for d in doc_ids:
            _write_str(out, d)
            out.write(struct.pack("<Q", index.doc_lengths[d]))
        out.write(struct.pack("<Q", len(index.postings)))
        for term in sorted(index.postings):
            _write_str(out, term)
            plist = index.postings[term]
            out.write(struct.pack("<Q", len(plist)))
            for doc_id, tf in plist:
                out.write(struct.pack("<QI", doc_pos[doc_id], tf))
        out.write(END_MAGIC)


class _Reader:
    def __init__(self, fh: io.BufferedReader, path):
        self.fh = fh
        self.path = path

    def take(self, n: int) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise CorruptIndexError(f"{self.path}: truncated index file")
        return data

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def read_str(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_index(path) -> InvertedIndex:
    with open(path, "rb") as fh:
        r = _Reader(fh, path)
        if r.take(len(MAGIC)) != MAGIC:
            raise CorruptIndexError(f"{path}: not an index file (bad magic)")
        (version,) = r.unpack("<I")
        if version != FORMAT_VERSION:
            raise CorruptIndexError(
                f"{path}: unsupported index version {version} "
                f"(expected {FORMAT_VERSION})"
            )
        lowercase, stemmer_code = r.unpack("<BB")
        if stemmer_code not in _STEMMER_NAMES:
            raise CorruptIndexError(f"{path}: unknown stemmer code {stemmer_code}")
        (n_stop,) = r.unpack("<I")
        stopwords = frozenset(r.read_str() for _ in range(n_stop))
        config = AnalyzerConfig(
            lowercase=bool(lowercase),
            stopwords=stopwords,
            stemmer=_STEMMER_NAMES[stemmer_code],
        )
        (n_docs,) = r.unpack("<Q")
        doc_ids: list[str] = []
        doc_lengths: dict[str, int] = {}
        for _ in range(n_docs):
            doc_id = r.read_str()
            (length,) = r.unpack("<Q")
            doc_ids.append(doc_id)
            doc_lengths[doc_id] = length
        (n_terms,) = r.unpack("<Q")
        postings: dict[str, list[tuple[str, int]]] = {}
        for _ in range(n_terms):
            term = r.read_str()
            (n_post,) = r.unpack("<Q")
            plist = []
            for _ in range(n_post):
                doc_idx, tf = r.unpack("<QI")
                if doc_idx >= len(doc_ids):
                    raise CorruptIndexError(f"{path}: posting references unknown doc")
                plist.append((doc_ids[doc_idx], tf))
            postings[term] = plist
        if r.take(len(END_MAGIC)) != END_MAGIC:
            raise CorruptIndexError(f"{path}: missing end marker")
    index = InvertedIndex(analyzer=config)
    index.doc_lengths = doc_lengths
    index.postings = postings
    return index
