"""Corpus ingestion: tokenization, TSV/qrels/candidate loaders, and
frequency-thresholded vocabularies.

All text is normalized the same way everywhere: lowercase first, then split
into maximal runs of Unicode letters and digits. Every other character is a
separator. This keeps tokenization bit-reproducible across platforms without
pulling in an external tokenizer.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"
PAD_ID = 0
OOV_ID = 1

# \w minus underscore == characters for which str.isalnum() is true.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DataError(ValueError):
    """A data file or data structure violates one of its invariants."""


def tokenize(text: str) -> list[str]:
    """Lowercase `text` and return maximal runs of letters and digits.

    >>> tokenize("The cat, sat!")
    ['the', 'cat', 'sat']
    >>> tokenize("Wi-Fi 802.11n")
    ['wi', 'fi', '802', '11n']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Document:
    doc_id: str
    tokens: list[str]


@dataclass
class Query:
    query_id: str
    tokens: list[str]

    @property
    def degenerate(self) -> bool:
        """True when tokenization left nothing to match on."""
        return not self.tokens


@dataclass
class Candidates:
    """One query's first-stage pool, in retrieval rank order.

    `scores` carries the first-stage scores when the pool came from an
    in-process retrieval or a run file; pools read from a candidates file
    have no scores (the file format does not include them).
    """

    query_id: str
    query_tokens: list[str]
    entries: list[tuple[str, list[str]]] = field(default_factory=list)
    scores: list[float] | None = None

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]


class Vocabulary:
    """Term/id map over terms with collection frequency >= `min_frequency`.

    Ids are dense. Id 0 is PAD and id 1 is OOV; both are reserved and never
    produced by frequency counting. Real terms are assigned ids from 2 in
    order of descending collection frequency (ties broken lexicographically),
    so the most frequent terms always get the smallest ids.

    The full collection-frequency table is kept even for pruned terms: the
    low-frequency query analysis needs true frequencies of OOV terms.
    """

    def __init__(
        self,
        term_to_id: dict[str, int],
        collection_frequency: dict[str, int],
        min_frequency: int,
    ):
        self.term_to_id = term_to_id
        self.collection_frequency = collection_frequency
        self.min_frequency = min_frequency

    @property
    def size(self) -> int:
        """Number of ids, PAD and OOV included."""
        return len(self.term_to_id)

    @property
    def term_count(self) -> int:
        """Number of real (non-reserved) terms."""
        return self.size - 2

    @property
    def distinct_collection_terms(self) -> int:
        return len(self.collection_frequency)

    def coverage_percent(self) -> float:
        """Percentage of distinct collection terms that are in-vocabulary."""
        return 100.0 * self.term_count / self.distinct_collection_terms

    def __contains__(self, term: str) -> bool:
        return term in self.term_to_id and term not in (PAD_TOKEN, OOV_TOKEN)

    def id_of(self, term: str) -> int:
        return self.term_to_id.get(term, OOV_ID)

    def ids_for(self, tokens: Iterable[str]) -> list[int]:
        return [self.term_to_id.get(t, OOV_ID) for t in tokens]

    def frequency_of(self, term: str) -> int:
        """Collection frequency of `term`, 0 if never seen (true OOV)."""
        return self.collection_frequency.get(term, 0)

    def save(self, path: str | Path) -> None:
        """Write `term<TAB>id<TAB>cf` sorted by id, plus a `.freq` sidecar
        holding the full frequency table (pruned terms included)."""
        path = Path(path)
        rows = sorted(self.term_to_id.items(), key=lambda kv: kv[1])
        with path.open("w", encoding="utf-8") as f:
            f.write(f"# min_frequency={self.min_frequency}\n")
            for term, term_id in rows:
                f.write(f"{term}\t{term_id}\t{self.collection_frequency.get(term, 0)}\n")
        with Path(str(path) + ".freq").open("w", encoding="utf-8") as f:
            for term in sorted(self.collection_frequency):
                f.write(f"{term}\t{self.collection_frequency[term]}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        term_to_id: dict[str, int] = {}
        frequency: dict[str, int] = {}
        min_frequency = 1
        with path.open("r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    m = re.search(r"min_frequency=(\d+)", line)
                    if m:
                        min_frequency = int(m.group(1))
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{line_no}: expected 3 tab-separated fields")
                term, term_id, cf = parts[0], int(parts[1]), int(parts[2])
                term_to_id[term] = term_id
                if term not in (PAD_TOKEN, OOV_TOKEN):
                    frequency[term] = cf
        freq_sidecar = Path(str(path) + ".freq")
        if freq_sidecar.exists():
            with freq_sidecar.open("r", encoding="utf-8") as f:
                for line_no, line in enumerate(f, start=1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    parts = line.split("\t")
                    if len(parts) != 2:
                        raise DataError(f"{freq_sidecar}:{line_no}: expected 2 fields")
                    frequency[parts[0]] = int(parts[1])
        ids = sorted(term_to_id.values())
        if ids != list(range(len(ids))):
            raise DataError(f"{path}: vocabulary ids are not dense 0..size-1")
        return cls(term_to_id, frequency, min_frequency)


def count_frequencies(documents: Iterable[Document], shard_count: int = 1) -> Counter:
    """Total term occurrences over the collection.

    Counting can be sharded; the merge is a plain integer sum, so it is
    independent of shard order by construction.
    """
    if shard_count < 1:
        raise ValueError("shard_count must be >= 1")
    shards = [Counter() for _ in range(shard_count)]
    n_docs = 0
    for i, doc in enumerate(documents):
        shards[i % shard_count].update(doc.tokens)
        n_docs += 1
    if n_docs == 0:
        raise DataError("cannot build a vocabulary from an empty collection")
    merged = Counter()
    for shard in shards:
        merged.update(shard)
    return merged


def build_vocabulary(
    documents: Iterable[Document],
    min_frequency: int,
    shard_count: int = 1,
) -> Vocabulary:
    """Build the vocabulary of terms with collection frequency >= `min_frequency`."""
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    frequency = count_frequencies(documents, shard_count=shard_count)
    kept = sorted(
        (t for t, c in frequency.items() if c >= min_frequency),
        key=lambda t: (-frequency[t], t),
    )
    term_to_id = {PAD_TOKEN: PAD_ID, OOV_TOKEN: OOV_ID}
    for offset, term in enumerate(kept):
        term_to_id[term] = 2 + offset
    return Vocabulary(term_to_id, dict(frequency), min_frequency)


def oov_query_stats(queries: Iterable[Query], vocabulary: Vocabulary) -> tuple[float, int]:
    """(percentage, count) of queries containing at least one OOV term."""
    total = 0
    oov = 0
    for query in queries:
        total += 1
        if any(t not in vocabulary for t in query.tokens):
            oov += 1
    if total == 0:
        raise DataError("empty query set")
    return 100.0 * oov / total, oov


def _split_line(path: Path, line_no: int, line: str, n_fields: int) -> list[str]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != n_fields:
        raise DataError(
            f"{path}:{line_no}: expected {n_fields} tab-separated fields, got {len(parts)}"
        )
    return parts


def load_collection(path: str | Path) -> Iterator[Document]:
    """Stream `doc_id<TAB>text` lines as tokenized Documents."""
    path = Path(path)
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            doc_id, text = _split_line(path, line_no, line, 2)
            if doc_id in seen:
                raise DataError(f"{path}:{line_no}: duplicate doc_id {doc_id!r}")
            seen.add(doc_id)
            yield Document(doc_id, tokenize(text))


def load_queries(path: str | Path) -> Iterator[Query]:
    """Stream `query_id<TAB>text` lines as tokenized Queries."""
    path = Path(path)
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            query_id, text = _split_line(path, line_no, line, 2)
            if query_id in seen:
                raise DataError(f"{path}:{line_no}: duplicate query_id {query_id!r}")
            seen.add(query_id)
            yield Query(query_id, tokenize(text))


def load_qrels(path: str | Path) -> dict[str, set[str]]:
    """TREC-style qrels: whitespace-separated `query_id 0 doc_id grade`.

    Pairs with grade >= 1 are relevant; grade-0 lines are ignored (binary
    relevance).
    """
    path = Path(path)
    qrels: dict[str, set[str]] = {}
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{line_no}: expected 4 whitespace-separated fields")
            query_id, _, doc_id, grade = parts
            try:
                grade_val = int(grade)
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: non-integer grade {grade!r}") from exc
            if grade_val >= 1:
                qrels.setdefault(query_id, set()).add(doc_id)
    return qrels


def load_candidates(path: str | Path) -> dict[str, Candidates]:
    """Load `query_id<TAB>doc_id<TAB>query_text<TAB>doc_text` tuples.

    Lines are grouped by query; within a query, file order is the
    first-stage ranking order and is preserved.
    """
    path = Path(path)
    pools: dict[str, Candidates] = {}
    seen: dict[str, set[str]] = {}
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            query_id, doc_id, query_text, doc_text = _split_line(path, line_no, line, 4)
            pool = pools.get(query_id)
            if pool is None:
                pool = Candidates(query_id, tokenize(query_text))
                pools[query_id] = pool
                seen[query_id] = set()
            if doc_id in seen[query_id]:
                raise DataError(f"{path}:{line_no}: duplicate doc_id {doc_id!r} for query {query_id!r}")
            seen[query_id].add(doc_id)
            pool.entries.append((doc_id, tokenize(doc_text)))
    return pools
