"""Re-ranking, rank metrics, threshold sweeps, significance and frequency buckets."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import Candidates, DataError
from .firststage import RankedList

Scorer = Callable[[list[str], list[str]], float]
"""(query_tokens, doc_tokens) -> relevance score; pure and deterministic."""


def worker_count() -> int:
    """Internal parallelism cap, from RERANK_LAB_THREADS (default 1)."""
    return max(1, int(os.environ.get("RERANK_LAB_THREADS", "1")))


# ---------------------------------------------------------------------------
# Re-ranking
# ---------------------------------------------------------------------------


def rerank(scorer: Scorer, pool: Candidates, depth: int) -> RankedList:
    """Re-score the top `depth` candidates; the tail keeps first-stage order.

    Within the re-ranked block, ties are broken by original first-stage rank.
    Tail entries keep their first-stage score when the pool carries scores,
    otherwise 0.0 (their order, not their score, is what downstream metrics
    read). The output is always a permutation of the input pool.
    """
    if depth < 1:
        raise ValueError("re-ranking threshold must be >= 1")
    if not pool.entries:
        return RankedList(pool.query_id, [])
    head = pool.entries[:depth]
    scored = [
        (doc_id, scorer(pool.query_tokens, doc_tokens)) for doc_id, doc_tokens in head
    ]
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][1], i))
    entries = [scored[i] for i in order]
    for rank, (doc_id, _) in enumerate(pool.entries):
        if rank < depth:
            continue
        score = pool.scores[rank] if pool.scores is not None else 0.0
        entries.append((doc_id, score))
    return RankedList(pool.query_id, entries)


def rerank_all(
    scorer: Scorer,
    candidates: Mapping[str, Candidates],
    depth: int,
    threads: int | None = None,
) -> dict[str, RankedList]:
    """Re-rank every pool; embarrassingly parallel, deterministic result."""
    threads = worker_count() if threads is None else threads
    query_ids = sorted(candidates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranked = list(pool.map(lambda q: rerank(scorer, candidates[q], depth), query_ids))
    else:
        ranked = [rerank(scorer, candidates[q], depth) for q in query_ids]
    return dict(zip(query_ids, ranked))


# ---------------------------------------------------------------------------
# Rank metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    per_query: dict[str, float]
    mean_metric: float
    evaluated: int
    skipped_no_relevant: int


def _aggregate(per_query: dict[str, float], skipped: int) -> EvalResult:
    n = len(per_query)
    mean = math.fsum(per_query[q] for q in sorted(per_query)) / n if n else 0.0
    return EvalResult(per_query, mean, n, skipped)


def mrr_at_k(
    runs: Mapping[str, RankedList], qrels: Mapping[str, set[str]], k: int = 10
) -> EvalResult:
    """Mean reciprocal rank of the first relevant document within the top k.

    Queries without any relevant document in the qrels are excluded from the
    mean and counted in `skipped_no_relevant`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    per_query: dict[str, float] = {}
    skipped = 0
    for query_id, run in runs.items():
        relevant = qrels.get(query_id, set())
        if not relevant:
            skipped += 1
            continue
        rr = 0.0
        for rank, (doc_id, _) in enumerate(run.entries[:k], start=1):
            if doc_id in relevant:
                rr = 1.0 / rank
                break
        per_query[query_id] = rr
    return _aggregate(per_query, skipped)


def recall_at_k(
    runs: Mapping[str, RankedList], qrels: Mapping[str, set[str]], k: int = 10
) -> EvalResult:
    """Fraction of each query's relevant documents found in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    per_query: dict[str, float] = {}
    skipped = 0
    for query_id, run in runs.items():
        relevant = qrels.get(query_id, set())
        if not relevant:
            skipped += 1
            continue
        top = {doc_id for doc_id, _ in run.entries[:k]}
        per_query[query_id] = len(relevant & top) / len(relevant)
    return _aggregate(per_query, skipped)


# ---------------------------------------------------------------------------
# Threshold sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    threshold: int
    mrr: float
    recall: float


@dataclass
class SweepResult:
    best_threshold: int
    best_mrr: float
    curve: list[SweepPoint]


def sweep_threshold(
    scorer: Scorer,
    candidates: Mapping[str, Candidates],
    qrels: Mapping[str, set[str]],
    thresholds: Sequence[int] = range(1, 301),
    k: int = 10,
    threads: int | None = None,
) -> SweepResult:
    """MRR@k / Recall@k for every re-ranking threshold; argmax by MRR.

    Model scores depend only on (query, document), so each pool is scored
    once at the deepest threshold and every smaller threshold re-sorts a
    prefix of those scores. This is exactly equivalent to re-ranking from
    scratch per threshold (tested against the naive path), just cheaper.
    Ties for the best threshold go to the smallest one.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("empty threshold range")
    if any(t < 1 for t in thresholds):
        raise ValueError("thresholds must be >= 1")
    deepest = max(thresholds)
    threads = worker_count() if threads is None else threads
    query_ids = sorted(candidates)

    def score_pool(query_id: str) -> list[float]:
        pool = candidates[query_id]
        return [
            scorer(pool.query_tokens, doc_tokens)
            for _, doc_tokens in pool.entries[:deepest]
        ]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as tp:
            all_scores = dict(zip(query_ids, tp.map(score_pool, query_ids)))
    else:
        all_scores = {q: score_pool(q) for q in query_ids}

    curve: list[SweepPoint] = []
    for t in thresholds:
        runs: dict[str, RankedList] = {}
        for query_id in query_ids:
            pool = candidates[query_id]
            scores = all_scores[query_id]
            head = min(t, len(scores))
            order = sorted(range(head), key=lambda i: (-scores[i], i))
            entries = [(pool.entries[i][0], scores[i]) for i in order]
            for rank in range(head, len(pool.entries)):
                tail_score = pool.scores[rank] if pool.scores is not None else 0.0
                entries.append((pool.entries[rank][0], tail_score))
            runs[query_id] = RankedList(query_id, entries)
        mrr = mrr_at_k(runs, qrels, k=k).mean_metric
        recall = recall_at_k(runs, qrels, k=k).mean_metric
        curve.append(SweepPoint(t, mrr, recall))

    best = max(curve, key=lambda p: (p.mrr, -p.threshold))
    return SweepResult(best.threshold, best.mrr, curve)


# ---------------------------------------------------------------------------
# Paired t-test
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def _betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def two_sided_t_pvalue(t: float, dof: int) -> float:
    """P(|T_dof| >= |t|) via the incomplete-beta identity."""
    if dof < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if t == 0.0:
        return 1.0
    x = dof / (dof + t * t)
    return _betainc_reg(dof / 2.0, 0.5, x)


def paired_ttest(
    metric_a: Mapping[str, float], metric_b: Mapping[str, float]
) -> float:
    """Two-sided paired t-test p-value over per-query metrics.

    The two mappings must cover the same query ids. Zero-variance
    differences short-circuit: p = 1.0 when the mean difference is 0,
    else p = 0.0.
    """
    if set(metric_a) != set(metric_b):
        raise DataError("paired t-test requires identical query sets")
    query_ids = sorted(metric_a)
    n = len(query_ids)
    if n < 2:
        raise DataError("paired t-test needs at least 2 queries")
    diffs = [metric_a[q] - metric_b[q] for q in query_ids]
    mean = math.fsum(diffs) / n
    var = math.fsum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / math.sqrt(var / n)
    return two_sided_t_pvalue(t, n - 1)


# ---------------------------------------------------------------------------
# Frequency buckets
# ---------------------------------------------------------------------------


@dataclass
class BucketPoint:
    threshold: float
    mrr: float | None  # None when no query qualifies
    count: int


def frequency_bucket_mrr(
    per_query_rr: Mapping[str, float],
    query_tokens: Mapping[str, list[str]],
    frequencies: Mapping[str, int],
    thresholds: Iterable[float],
) -> list[BucketPoint]:
    """Cumulative low-frequency buckets: MRR over queries whose rarest term
    has collection frequency <= x.

    Terms absent from the frequency table count as frequency 0 (true OOV).
    Queries without tokens never qualify. Buckets are cumulative, so counts
    are non-decreasing in x and the bucket at x = inf equals the global MRR.
    """
    min_cf: dict[str, int] = {}
    for query_id in per_query_rr:
        tokens = query_tokens.get(query_id)
        if not tokens:
            continue
        min_cf[query_id] = min(frequencies.get(t, 0) for t in tokens)
    points: list[BucketPoint] = []
    for x in thresholds:
        qualifying = [q for q in sorted(min_cf) if min_cf[q] <= x]
        if not qualifying:
            points.append(BucketPoint(x, None, 0))
            continue
        mrr = math.fsum(per_query_rr[q] for q in qualifying) / len(qualifying)
        points.append(BucketPoint(x, mrr, len(qualifying)))
    return points


# ---------------------------------------------------------------------------
# Memory accounting
# ---------------------------------------------------------------------------


def memory_footprint(term_count: int, dim: int) -> int:
    """Embedding-table footprint in bytes: one 32-bit value per cell."""
    if term_count < 0 or dim < 0:
        raise ValueError("term_count and dim must be non-negative")
    return term_count * dim * 4


def format_bytes(n: int) -> str:
    """Decimal-unit rendering: 4230567600 -> '4.23 GB', 651453600 -> '651 MB'."""
    if n >= 1e9:
        return f"{n / 1e9:.2f} GB"
    if n >= 1e6:
        return f"{round(n / 1e6):.0f} MB"
    if n >= 1e3:
        return f"{round(n / 1e3):.0f} KB"
    return f"{n} B"


# ---------------------------------------------------------------------------
# Plot-ready TSV outputs
# ---------------------------------------------------------------------------


def _write_tsv(path: str | Path, header_meta: list[str] | None, columns: list[str],
               rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for line in header_meta or []:
            f.write(f"# {line}\n")
        f.write("\t".join(columns) + "\n")
        for row in rows:
            f.write("\t".join(str(cell) for cell in row) + "\n")


def write_threshold_curve(path: str | Path, result: SweepResult,
                          header_meta: list[str] | None = None) -> None:
    meta = list(header_meta or [])
    meta.append(f"best_threshold={result.best_threshold} best_mrr={result.best_mrr!r}")
    _write_tsv(
        path, meta, ["T", "mrr", "recall"],
        [(p.threshold, repr(p.mrr), repr(p.recall)) for p in result.curve],
    )


def write_bucket_curve(path: str | Path, points: list[BucketPoint],
                       header_meta: list[str] | None = None) -> None:
    _write_tsv(
        path, header_meta, ["x", "mrr", "count"],
        [(p.threshold, "NA" if p.mrr is None else repr(p.mrr), p.count) for p in points],
    )


def write_per_query(path: str | Path, rr: EvalResult, recall: EvalResult,
                    header_meta: list[str] | None = None) -> None:
    rows = [
        (query_id, repr(rr.per_query[query_id]), repr(recall.per_query[query_id]))
        for query_id in sorted(rr.per_query)
    ]
    _write_tsv(path, header_meta, ["query_id", "rr", "recall"], rows)


def read_per_query(path: str | Path) -> tuple[dict[str, float], dict[str, float]]:
    """Read a per-query TSV back into (rr, recall) mappings."""
    path = Path(path)
    rr: dict[str, float] = {}
    recall: dict[str, float] = {}
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#") or line.startswith("query_id\t"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{line_no}: expected 3 tab-separated fields")
            rr[parts[0]] = float(parts[1])
            recall[parts[0]] = float(parts[2])
    return rr, recall


def write_significance(path: str | Path, name_a: str, name_b: str, p: float,
                       header_meta: list[str] | None = None) -> None:
    _write_tsv(path, header_meta, ["run_a", "run_b", "p"], [(name_a, name_b, repr(p))])
