"""Neural passage re-ranking laboratory.

BM25 candidate generation over an inverted index, three trainable neural
re-rankers (KNRM, CONV-KNRM, MatchPyramid) on a from-scratch differentiable
core, frequency-thresholded vocabularies, and analysis tooling for
re-ranking-threshold sensitivity and low-frequency-query performance.
"""

from .autograd import KernelBank, Tensor, gradient_check
from .corpus import (
    Candidates,
    DataError,
    Document,
    Query,
    Vocabulary,
    build_vocabulary,
    load_candidates,
    load_collection,
    load_qrels,
    load_queries,
    oov_query_stats,
    tokenize,
)
from .embeddings import (
    EmbeddingTable,
    SubwordEmbedder,
    compose_word_vector,
    hash_ngram,
    load_pretrained,
    subword_ngrams,
)
from .evaluation import (
    frequency_bucket_mrr,
    memory_footprint,
    mrr_at_k,
    paired_ttest,
    recall_at_k,
    rerank,
    sweep_threshold,
)
from .firststage import BM25Params, InvertedIndex, RankedList, bm25_score, build_index, retrieve
from .optim import AdamState, OptimizerConfig, adam_step
from .rankers import (
    ConvKnrmModel,
    KnrmModel,
    MatchPyramidModel,
    ModelInputConfig,
    build_model,
)
from .training import TrainConfig, TrainingTriple, TripleReader, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "BM25Params",
    "Candidates",
    "ConvKnrmModel",
    "DataError",
    "Document",
    "EmbeddingTable",
    "InvertedIndex",
    "KernelBank",
    "KnrmModel",
    "MatchPyramidModel",
    "ModelInputConfig",
    "OptimizerConfig",
    "Query",
    "RankedList",
    "SubwordEmbedder",
    "Tensor",
    "TrainConfig",
    "TrainingTriple",
    "TripleReader",
    "Vocabulary",
    "adam_step",
    "bm25_score",
    "build_index",
    "build_model",
    "build_vocabulary",
    "compose_word_vector",
    "frequency_bucket_mrr",
    "gradient_check",
    "hash_ngram",
    "load_candidates",
    "load_collection",
    "load_pretrained",
    "load_qrels",
    "load_queries",
    "memory_footprint",
    "mrr_at_k",
    "oov_query_stats",
    "paired_ttest",
    "recall_at_k",
    "rerank",
    "retrieve",
    "subword_ngrams",
    "sweep_threshold",
    "tokenize",
    "train",
]
