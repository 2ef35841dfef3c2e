"""Inverted index and BM25 scoring for first-stage candidate generation."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus import DataError, Document


@dataclass
class BM25Params:
    k1: float = 0.6
    b: float = 0.8

    def __post_init__(self) -> None:
        if self.k1 < 0:
            raise ValueError("k1 must be non-negative")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must be in [0, 1]")


@dataclass
class RankedList:
    """Per-query ordered (doc_id, score) list.

    First-stage lists keep scores non-increasing with ties broken by
    ascending doc_id. Re-ranked lists reuse the type but only the re-ranked
    block is score-sorted; the tail keeps first-stage order.
    """

    query_id: str
    entries: list[tuple[str, float]] = field(default_factory=list)

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]

    def validate(self) -> None:
        ids = self.doc_ids()
        if len(set(ids)) != len(ids):
            raise DataError(f"ranked list for {self.query_id} has duplicate doc_ids")
        for (id_a, s_a), (id_b, s_b) in zip(self.entries, self.entries[1:]):
            if s_b > s_a or (s_b == s_a and id_b < id_a):
                raise DataError(f"ranked list for {self.query_id} is out of order")


class InvertedIndex:
    """Postings (term -> sorted (doc_id, tf) list) plus document statistics."""

    def __init__(
        self,
        postings: dict[str, list[tuple[str, int]]],
        doc_length: dict[str, int],
    ):
        self.postings = postings
        self.doc_length = doc_length
        self.doc_count = len(doc_length)
        self.total_tokens = sum(doc_length.values())
        self.avg_doc_length = self.total_tokens / self.doc_count if self.doc_count else 0.0

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def term_frequency(self, term: str, doc_id: str) -> int:
        posting = self.postings.get(term)
        if not posting:
            return 0
        lo = bisect.bisect_left(posting, (doc_id,))
        if lo < len(posting) and posting[lo][0] == doc_id:
            return posting[lo][1]
        return 0

    def idf(self, term: str) -> float:
        """ln(1 + (N - df + 0.5) / (df + 0.5)); positive for any df in [1, N]."""
        df = self.document_frequency(term)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def save(self, path: str | Path) -> None:
        """Plain-text index dump: doc lengths, then postings, both sorted."""
        path = Path(path)
        with path.open("w", encoding="utf-8") as f:
            f.write(f"#docs\t{self.doc_count}\n")
            for doc_id in sorted(self.doc_length):
                f.write(f"L\t{doc_id}\t{self.doc_length[doc_id]}\n")
            for term in sorted(self.postings):
                cells = "\t".join(f"{d}:{tf}" for d, tf in self.postings[term])
                f.write(f"P\t{term}\t{cells}\n")

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        path = Path(path)
        postings: dict[str, list[tuple[str, int]]] = {}
        doc_length: dict[str, int] = {}
        with path.open("r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                parts = line.rstrip("\n").split("\t")
                if parts[0] == "#docs":
                    continue
                if parts[0] == "L" and len(parts) == 3:
                    doc_length[parts[1]] = int(parts[2])
                elif parts[0] == "P" and len(parts) >= 3:
                    entries = []
                    for cell in parts[2:]:
                        doc_id, _, tf = cell.rpartition(":")
                        entries.append((doc_id, int(tf)))
                    postings[parts[1]] = entries
                else:
                    raise DataError(f"{path}:{line_no}: malformed index line")
        return cls(postings, doc_length)


def build_index(documents: Iterable[Document]) -> InvertedIndex:
    """Index a collection. Rebuilding from the same stream is bit-identical."""
    term_docs: dict[str, dict[str, int]] = {}
    doc_length: dict[str, int] = {}
    for doc in documents:
        if doc.doc_id in doc_length:
            raise DataError(f"duplicate doc_id {doc.doc_id!r} in collection")
        doc_length[doc.doc_id] = len(doc.tokens)
        for term in doc.tokens:
            per_term = term_docs.setdefault(term, {})
            per_term[doc.doc_id] = per_term.get(doc.doc_id, 0) + 1
    if not doc_length:
        raise DataError("cannot index an empty collection")
    postings = {
        term: sorted(per_term.items()) for term, per_term in term_docs.items()
    }
    return InvertedIndex(postings, doc_length)


def bm25_term_weight(
    tf: int, df: int, doc_len: int, index: InvertedIndex, params: BM25Params
) -> float:
    if tf == 0:
        return 0.0
    idf = math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))
    norm = params.k1 * (1.0 - params.b + params.b * doc_len / index.avg_doc_length)
    return idf * tf * (params.k1 + 1.0) / (tf + norm)


def bm25_score(
    query_tokens: list[str],
    doc_id: str,
    index: InvertedIndex,
    params: BM25Params | None = None,
) -> float:
    """Okapi BM25 for one (query, document) pair.

    Repeated query terms contribute once per occurrence in the query.
    """
    params = params or BM25Params()
    if doc_id not in index.doc_length:
        raise KeyError(f"unknown doc_id {doc_id!r}")
    doc_len = index.doc_length[doc_id]
    score = 0.0
    for term in query_tokens:
        tf = index.term_frequency(term, doc_id)
        if tf == 0:
            continue
        score += bm25_term_weight(tf, index.document_frequency(term), doc_len, index, params)
    return score


def retrieve(
    query_tokens: list[str],
    index: InvertedIndex,
    params: BM25Params | None = None,
    k: int = 1000,
    query_id: str = "",
) -> RankedList:
    """Top-k documents by BM25, ties broken by ascending doc_id.

    Only documents containing at least one query term (score > 0) are
    returned, so fewer than k entries come back on small or disjoint corpora.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    params = params or BM25Params()
    scores: dict[str, float] = {}
    for term in query_tokens:
        posting = index.postings.get(term)
        if not posting:
            continue
        df = len(posting)
        for doc_id, tf in posting:
            weight = bm25_term_weight(tf, df, index.doc_length[doc_id], index, params)
            scores[doc_id] = scores.get(doc_id, 0.0) + weight
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return RankedList(query_id, ranked[:k])


def write_run(path: str | Path, runs: Iterable[RankedList], tag: str = "rerank-lab") -> None:
    """TREC run format: `query_id Q0 doc_id rank score tag`, rank from 1."""
    with Path(path).open("w", encoding="utf-8") as f:
        for run in runs:
            for rank, (doc_id, score) in enumerate(run.entries, start=1):
                f.write(f"{run.query_id} Q0 {doc_id} {rank} {score!r} {tag}\n")


def read_run(path: str | Path) -> dict[str, RankedList]:
    """Read a TREC run file back into per-query RankedLists (file order kept)."""
    path = Path(path)
    runs: dict[str, RankedList] = {}
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if len(parts) != 6:
                raise DataError(f"{path}:{line_no}: expected 6 fields in TREC run line")
            query_id, _, doc_id, _, score, _ = parts
            runs.setdefault(query_id, RankedList(query_id)).entries.append(
                (doc_id, float(score))
            )
    return runs
