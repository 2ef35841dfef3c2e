"""Per-token dense vectors: pretrained word tables and subword composition.

Two providers:

* `EmbeddingTable` - one row per vocabulary id, loaded from a pretrained
  text file (GloVe-style `term v1 ... vdim` lines) and updated during
  training. Row 0 (PAD) is all-zero and frozen; row 1 (OOV) is trainable.
* `SubwordEmbedder` - composes a vector for any word by summing the vectors
  of its character trigrams, with a direct-lookup table for highly frequent
  words. Trigram vectors live in a fixed number of hash buckets.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .corpus import DataError, PAD_ID, Vocabulary

logger = logging.getLogger(__name__)

NGRAM_LENGTH = 3
DEFAULT_BUCKET_COUNT = 2_000_000
_CACHE_MAGIC = b"RLEMCACH"

_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


class EmbeddingTable:
    """Dense float32 matrix of shape (vocabulary size, dim)."""

    def __init__(self, matrix: np.ndarray, dim: int):
        if matrix.ndim != 2 or matrix.shape[1] != dim:
            raise ValueError("embedding matrix shape does not match dim")
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        self.dim = dim
        self.matrix[PAD_ID, :] = 0.0
        # Per-row trainable flags; only PAD is frozen.
        self.row_trainable = np.ones(self.matrix.shape[0], dtype=bool)
        self.row_trainable[PAD_ID] = False

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def footprint_bytes(self) -> int:
        return self.rows * self.dim * 4

    def save_cache(self, path: str | Path) -> None:
        """Binary cache: magic, dim, row count, then raw little-endian rows."""
        with Path(path).open("wb") as f:
            f.write(_CACHE_MAGIC)
            f.write(struct.pack("<II", self.dim, self.rows))
            f.write(self.matrix.astype("<f4").tobytes())

    @classmethod
    def load_cache(cls, path: str | Path) -> "EmbeddingTable":
        with Path(path).open("rb") as f:
            magic = f.read(len(_CACHE_MAGIC))
            if magic != _CACHE_MAGIC:
                raise DataError(f"{path}: not an embedding cache file")
            dim, rows = struct.unpack("<II", f.read(8))
            data = np.frombuffer(f.read(rows * dim * 4), dtype="<f4")
            if data.size != rows * dim:
                raise DataError(f"{path}: truncated embedding cache")
        return cls(data.reshape(rows, dim).copy(), dim)


def _parse_vector_line(parts: list[str], dim: int, path: Path, line_no: int) -> np.ndarray:
    if len(parts) != dim + 1:
        raise DataError(
            f"{path}:{line_no}: expected {dim} values for term {parts[0]!r}, got {len(parts) - 1}"
        )
    return np.asarray([float(v) for v in parts[1:]], dtype=np.float32)


def load_pretrained(
    path: str | Path,
    vocabulary: Vocabulary,
    dim: int,
    seed: int = 0,
    init_scale: float = 0.01,
) -> EmbeddingTable:
    """Build an EmbeddingTable for `vocabulary` from a pretrained text file.

    Vocabulary terms found in the file get the file's vector. Terms missing
    from the file (the OOV row included) are initialized uniformly at random
    in [-init_scale, init_scale] from a generator seeded with `seed`, drawn
    in vocabulary id order so reloads are bit-identical. The PAD row is zero.
    """
    path = Path(path)
    wanted = vocabulary.term_to_id
    found: dict[str, np.ndarray] = {}
    duplicates = 0
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split(" ")
            if line_no == 1 and len(parts) == 2:
                # Optional `count dim` header.
                try:
                    int(parts[0]), int(parts[1])
                    continue
                except ValueError:
                    pass
            if not parts or parts == [""]:
                continue
            term = parts[0]
            if term in found:
                duplicates += 1
                continue
            if term in wanted:
                found[term] = _parse_vector_line(parts, dim, path, line_no)
            elif len(parts) != dim + 1:
                raise DataError(
                    f"{path}:{line_no}: expected {dim} values, got {len(parts) - 1}"
                )
    if duplicates:
        logger.warning("%s: %d duplicate terms, kept first occurrence", path, duplicates)

    rng = np.random.default_rng(seed)
    matrix = np.zeros((vocabulary.size, dim), dtype=np.float32)
    for term, term_id in sorted(wanted.items(), key=lambda kv: kv[1]):
        if term_id == PAD_ID:
            continue
        vec = found.get(term)
        if vec is None:
            vec = rng.uniform(-init_scale, init_scale, size=dim).astype(np.float32)
        matrix[term_id] = vec
    return EmbeddingTable(matrix, dim)


def random_table(
    vocabulary: Vocabulary, dim: int, seed: int = 0, init_scale: float = 0.01
) -> EmbeddingTable:
    """Seeded uniform table for experiments without a pretrained file.

    Same layout as `load_pretrained` with every term missing: rows drawn in
    id order from one generator, PAD row zero.
    """
    rng = np.random.default_rng(seed)
    matrix = np.zeros((vocabulary.size, dim), dtype=np.float32)
    for row in range(1, vocabulary.size):
        matrix[row] = rng.uniform(-init_scale, init_scale, size=dim).astype(np.float32)
    return EmbeddingTable(matrix, dim)


def subword_ngrams(word: str) -> list[str]:
    """Character trigrams of `word` wrapped in boundary markers.

    >>> subword_ngrams("where")
    ['<wh', 'whe', 'her', 'ere', 're>']
    >>> subword_ngrams("a")
    ['<a>']
    """
    if not word:
        raise ValueError("cannot take n-grams of an empty word")
    wrapped = f"<{word}>"
    return [wrapped[i : i + NGRAM_LENGTH] for i in range(len(wrapped) - NGRAM_LENGTH + 1)]


def hash_ngram(ngram: str, bucket_count: int) -> int:
    """FNV-1a (32-bit) over the UTF-8 bytes, modulo `bucket_count`.

    Pure-integer arithmetic, so the bucket of a given n-gram is stable
    across runs, platforms, and PYTHONHASHSEED settings.
    """
    h = _FNV_OFFSET
    for byte in ngram.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h % bucket_count


class SubwordEmbedder:
    """Trigram-bucket embedder with a direct table for frequent words.

    Composition of a frequent word returns its direct vector; any other word
    is the sum of its trigram bucket vectors. Bucket vectors may be given as
    a dense (bucket_count, dim) matrix; otherwise each bucket's vector is
    derived lazily from (seed, bucket index), which keeps the default two
    million buckets affordable.
    """

    def __init__(
        self,
        dim: int,
        bucket_count: int = DEFAULT_BUCKET_COUNT,
        bucket_vectors: np.ndarray | None = None,
        frequent: dict[str, np.ndarray] | None = None,
        seed: int = 0,
        init_scale: float = 0.01,
    ):
        if bucket_count < 1:
            raise ValueError("bucket_count must be >= 1")
        if bucket_vectors is not None and bucket_vectors.shape != (bucket_count, dim):
            raise ValueError("bucket_vectors shape must be (bucket_count, dim)")
        self.dim = dim
        self.ngram_length = NGRAM_LENGTH
        self.bucket_count = bucket_count
        self.bucket_vectors = (
            None if bucket_vectors is None else np.asarray(bucket_vectors, dtype=np.float32)
        )
        self.frequent = {} if frequent is None else frequent
        self.seed = seed
        self.init_scale = init_scale
        self._lazy_cache: dict[int, np.ndarray] = {}

    def bucket_vector(self, bucket: int) -> np.ndarray:
        if self.bucket_vectors is not None:
            return self.bucket_vectors[bucket]
        vec = self._lazy_cache.get(bucket)
        if vec is None:
            rng = np.random.default_rng((self.seed, bucket))
            vec = rng.uniform(-self.init_scale, self.init_scale, size=self.dim).astype(
                np.float32
            )
            self._lazy_cache[bucket] = vec
        return vec

    def compose(self, word: str) -> np.ndarray:
        """Direct vector for frequent words, trigram-bucket sum otherwise."""
        if not word:
            raise ValueError("cannot compose an empty word")
        direct = self.frequent.get(word)
        if direct is not None:
            return np.array(direct, dtype=np.float32)
        out = np.zeros(self.dim, dtype=np.float32)
        for ngram in subword_ngrams(word):
            out += self.bucket_vector(hash_ngram(ngram, self.bucket_count))
        return out

    @classmethod
    def from_text_file(
        cls,
        path: str | Path,
        dim: int,
        bucket_count: int = DEFAULT_BUCKET_COUNT,
        seed: int = 0,
    ) -> "SubwordEmbedder":
        """Load the frequent-word table from a `term v1 ... vdim` text file."""
        path = Path(path)
        frequent: dict[str, np.ndarray] = {}
        with path.open("r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                parts = line.rstrip("\n").split(" ")
                if line_no == 1 and len(parts) == 2:
                    try:
                        int(parts[0]), int(parts[1])
                        continue
                    except ValueError:
                        pass
                if not parts or parts == [""]:
                    continue
                if parts[0] in frequent:
                    logger.warning("%s:%d: duplicate term %r, kept first", path, line_no, parts[0])
                    continue
                frequent[parts[0]] = _parse_vector_line(parts, dim, path, line_no)
        return cls(dim, bucket_count=bucket_count, frequent=frequent, seed=seed)


def frequent_terms(vocabulary: Vocabulary, top_k: int = 10_000) -> list[str]:
    """Top-k terms by collection frequency (the desk-scale frequent set)."""
    ranked = sorted(
        vocabulary.collection_frequency.items(), key=lambda kv: (-kv[1], kv[0])
    )
    return [term for term, _ in ranked[:top_k]]


def compose_word_vector(word: str, embedder: SubwordEmbedder) -> np.ndarray:
    return embedder.compose(word)


def table_from_subword(
    vocabulary: Vocabulary, embedder: SubwordEmbedder
) -> EmbeddingTable:
    """Materialize a vocabulary-aligned EmbeddingTable by composing every term.

    Lets the rankers train over subword-derived vectors with the same
    machinery as word-level tables.
    """
    matrix = np.zeros((vocabulary.size, embedder.dim), dtype=np.float32)
    for term, term_id in sorted(vocabulary.term_to_id.items(), key=lambda kv: kv[1]):
        if term_id == PAD_ID:
            continue
        matrix[term_id] = embedder.compose(term)
    return EmbeddingTable(matrix, embedder.dim)
