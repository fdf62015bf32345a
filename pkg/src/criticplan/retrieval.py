"""BM25 retrieval over plain-text corpora.

Tokenization is lowercase alphanumeric splitting, no stemming, no stopwords.
The index is immutable after build and persists to a versioned on-disk format
whose bytes are a pure function of the inputs.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    ContractViolationError,
    EmptyQueryError,
    IndexFormatError,
    IngestionError,
)
from .mdp import Observation, ObservationKind

INDEX_MAGIC = "criticplan-bm25-index"
INDEX_VERSION = 1

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 <= 0:
            raise ContractViolationError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ContractViolationError("b must be in [0, 1]")


@dataclass(frozen=True)
class Corpus:
    """Built BM25 index: documents plus token statistics.

    `postings` maps term -> {doc position -> term frequency}; treat as
    read-only after construction.
    """

    corpus_id: str
    params: Bm25Params
    doc_ids: tuple[str, ...]
    doc_texts: tuple[str, ...]
    doc_lengths: tuple[int, ...]
    avgdl: float
    postings: Mapping[str, Mapping[int, int]]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, {}))

    def idf(self, term: str) -> float:
        df = self.document_frequency(term)
        n = len(self.doc_ids)
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def text_of(self, doc_id: str) -> str:
        return self.doc_texts[self.doc_ids.index(doc_id)]


def build_index(
    documents: Iterable[tuple[str, str]],
    params: Bm25Params = Bm25Params(),
    corpus_id: str = "corpus",
) -> Corpus:
    """Index (doc_id, text) pairs. Duplicate doc_ids are an ingestion error."""
    doc_ids: list[str] = []
    doc_texts: list[str] = []
    doc_lengths: list[int] = []
    postings: dict[str, dict[int, int]] = {}
    seen: set[str] = set()
    for doc_id, text in documents:
        if doc_id in seen:
            raise IngestionError(f"duplicate doc_id {doc_id!r}")
        seen.add(doc_id)
        position = len(doc_ids)
        tokens = tokenize(text)
        doc_ids.append(doc_id)
        doc_texts.append(text)
        doc_lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, {})[position] = tf
    avgdl = sum(doc_lengths) / len(doc_lengths) if doc_lengths else 0.0
    return Corpus(
        corpus_id=corpus_id,
        params=params,
        doc_ids=tuple(doc_ids),
        doc_texts=tuple(doc_texts),
        doc_lengths=tuple(doc_lengths),
        avgdl=avgdl,
        postings=postings,
    )


def score_query(corpus: Corpus, query: str) -> dict[str, float]:
    """Okapi BM25 scores for every document matching at least one query term."""
    terms = tokenize(query)
    if not terms:
        raise EmptyQueryError(f"query {query!r} tokenized to nothing")
    k1, b = corpus.params.k1, corpus.params.b
    scores: dict[int, float] = {}
    for term in terms:
        entry = corpus.postings.get(term)
        if not entry:
            continue
        idf = corpus.idf(term)
        for position, tf in entry.items():
            norm = k1 * (1.0 - b + b * corpus.doc_lengths[position] / corpus.avgdl)
            scores[position] = scores.get(position, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
    return {corpus.doc_ids[p]: s for p, s in scores.items()}


def retrieve_scored(corpus: Corpus, query: str, k: int) -> list[tuple[Observation, float]]:
    """Top-k Doc observations with scores, descending; ties by ascending doc_id.

    Zero-score documents carry no evidence and are excluded.
    """
    if k < 1:
        raise ContractViolationError("k must be >= 1")
    scores = score_query(corpus, query)
    ranked = sorted(
        ((doc_id, s) for doc_id, s in scores.items() if s > 0.0),
        key=lambda pair: (-pair[1], pair[0]),
    )
    out = []
    for doc_id, s in ranked[:k]:
        out.append(
            (Observation(kind=ObservationKind.DOC, text=corpus.text_of(doc_id), doc_id=doc_id), s)
        )
    return out


def retrieve(corpus: Corpus, query: str, k: int) -> list[Observation]:
    return [obs for obs, _ in retrieve_scored(corpus, query, k)]


# ------------------------------------------------------------------ persistence


def _index_payload(corpus: Corpus) -> dict:
    return {
        "corpus_id": corpus.corpus_id,
        "params": {"k1": corpus.params.k1, "b": corpus.params.b},
        "doc_ids": list(corpus.doc_ids),
        "doc_texts": list(corpus.doc_texts),
        "doc_lengths": list(corpus.doc_lengths),
        "avgdl": corpus.avgdl,
        "postings": {
            term: {str(pos): tf for pos, tf in entry.items()}
            for term, entry in corpus.postings.items()
        },
    }


def index_bytes(corpus: Corpus) -> bytes:
    """Serialized index; byte-identical for identical inputs."""
    header = f"{INDEX_MAGIC} {INDEX_VERSION}\n"
    body = json.dumps(_index_payload(corpus), ensure_ascii=False, sort_keys=True,
                      separators=(",", ":"))
    return (header + body + "\n").encode("utf-8")


def save_index(corpus: Corpus, path) -> None:
    Path(path).write_bytes(index_bytes(corpus))


def load_index(path) -> Corpus:
    raw = Path(path).read_bytes().decode("utf-8")
    header, _, body = raw.partition("\n")
    parts = header.split()
    if len(parts) != 2 or parts[0] != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic header {header!r}")
    if int(parts[1]) != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {parts[1]}")
    data = json.loads(body)
    return Corpus(
        corpus_id=data["corpus_id"],
        params=Bm25Params(**data["params"]),
        doc_ids=tuple(data["doc_ids"]),
        doc_texts=tuple(data["doc_texts"]),
        doc_lengths=tuple(data["doc_lengths"]),
        avgdl=data["avgdl"],
        postings={
            term: {int(pos): tf for pos, tf in entry.items()}
            for term, entry in data["postings"].items()
        },
    )


# -------------------------------------------------------------------- ingestion


def ingest_directory(directory) -> list[tuple[str, str]]:
    """Read every *.txt file under `directory`; doc_id is the relative path."""
    root = Path(directory)
    if not root.is_dir():
        raise IngestionError(f"{directory}: not a directory")
    documents = []
    for path in sorted(root.rglob("*.txt")):
        documents.append((path.relative_to(root).as_posix(), path.read_text(encoding="utf-8")))
    return documents


def ingest_jsonl(path) -> list[tuple[str, str]]:
    """Read a line-delimited file of {"id": ..., "text": ...} records."""
    documents = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                documents.append((str(record["id"]), str(record["text"])))
            except (ValueError, KeyError) as err:
                raise IngestionError(f"{path}:{line_number}: bad document record: {err}")
    return documents
