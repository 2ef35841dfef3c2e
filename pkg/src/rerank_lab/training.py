"""Pairwise training with margin ranking loss and validation-driven early stop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError
from .checkpoint import save_checkpoint
from .corpus import Candidates, DataError, Vocabulary, tokenize
from .evaluation import mrr_at_k, rerank
from .optim import AdamState, OptimizerConfig, adam_step
from .rankers import ModelInputConfig, RankerBase, save_model_config


@dataclass
class TrainingTriple:
    query_tokens: list[str]
    positive_tokens: list[str]
    negative_tokens: list[str]


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 1
    learning_rate: float = 0.001
    margin: float = 1.0
    eval_every: int = 5000
    patience: int = 2
    seed: int = 0
    shuffle: bool = False  # benchmark triple files come pre-shuffled
    rerank_depth: int = 300  # provisional threshold for validation MRR

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


class TripleReader:
    """Streams `query<TAB>positive<TAB>negative` lines as tokenized triples.

    Malformed or degenerate lines (wrong field count, an empty field after
    tokenization, positive == negative) are skipped and counted in
    `self.skipped`. Re-iterating re-opens the file, so multi-epoch runs work.
    """

    def __init__(self, path: str | Path, input_config: ModelInputConfig | None = None):
        self.path = Path(path)
        self.input_config = input_config or ModelInputConfig()
        self.skipped = 0

    def __iter__(self) -> Iterator[TrainingTriple]:
        max_q = self.input_config.max_query_length
        max_d = self.input_config.max_doc_length
        with self.path.open("r", encoding="utf-8") as f:
            for line in f:
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    self.skipped += 1
                    continue
                query = tokenize(parts[0])[:max_q]
                positive = tokenize(parts[1])[:max_d]
                negative = tokenize(parts[2])[:max_d]
                if not query or not positive or not negative or positive == negative:
                    self.skipped += 1
                    continue
                yield TrainingTriple(query, positive, negative)


@dataclass
class ValidationSet:
    candidates: dict[str, Candidates]
    qrels: dict[str, set[str]]


@dataclass
class LogRow:
    batch: int
    loss: float
    val_mrr: float | None


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_mrr: float
    log: list[LogRow] = field(default_factory=list)
    batches: int = 0


def _sorted_sum(contributions: list[np.ndarray]) -> np.ndarray:
    """Order-independent batch reduction: sort each entry's addends, then sum.

    Two batches holding the same triples in different order therefore produce
    bit-identical gradients.
    """
    if len(contributions) == 1:
        return contributions[0]
    stacked = np.stack(contributions)
    stacked.sort(axis=0)
    return stacked.sum(axis=0)


def validation_mrr(
    model: RankerBase,
    validation: ValidationSet,
    vocabulary: Vocabulary,
    depth: int,
) -> float:
    def scorer(query_tokens: list[str], doc_tokens: list[str]) -> float:
        return model.score(vocabulary.ids_for(query_tokens), vocabulary.ids_for(doc_tokens))

    runs = {
        query_id: rerank(scorer, pool, depth)
        for query_id, pool in sorted(validation.candidates.items())
    }
    return mrr_at_k(runs, validation.qrels).mean_metric


def _train_batch(
    model: RankerBase,
    params: list[ag.Tensor],
    batch: list[TrainingTriple],
    vocabulary: Vocabulary,
    state: AdamState,
    opt_config: OptimizerConfig,
    margin: float,
) -> float:
    """One optimizer step over `batch`; returns the mean margin loss."""
    losses: list[float] = []
    stashes: list[list[np.ndarray]] = [[] for _ in params]
    for triple in batch:
        for p in params:
            p.zero_grad()
        q_ids = vocabulary.ids_for(triple.query_tokens)
        s_pos = model.score_ids(q_ids, vocabulary.ids_for(triple.positive_tokens))
        s_neg = model.score_ids(q_ids, vocabulary.ids_for(triple.negative_tokens))
        loss = ag.margin_ranking_loss(s_pos, s_neg, margin)
        loss.backward(seed=1.0 / len(batch))
        losses.append(loss.item())
        for stash, p in zip(stashes, params):
            stash.append(p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
    grads = [_sorted_sum(stash) for stash in stashes]
    try:
        adam_step(params, grads, state, opt_config)
    except NonFiniteError as exc:
        raise NonFiniteError(f"aborting: {exc} (batch of {len(batch)} triples)") from exc
    return math.fsum(losses) / len(losses)


def train(
    model: RankerBase,
    triples: Iterable[TrainingTriple],
    validation: ValidationSet,
    vocabulary: Vocabulary,
    config: TrainConfig,
    run_dir: str | Path | None = None,
) -> TrainResult:
    """Run pairwise training and keep the best-validation-MRR checkpoint.

    Per batch: score positives and negatives, average the margin ranking
    loss over the batch, take one Adam step. Every `eval_every` batches the
    model is evaluated (MRR@10 after re-ranking `rerank_depth` candidates,
    checkpointed as `step_N.ckpt`); training stops after `patience`
    consecutive evaluations without improvement, or when the epochs end. A
    final evaluation always closes the log, and the model is left loaded
    with the best checkpoint (also saved as `best.ckpt`).
    """
    params = model.parameters()
    opt_config = OptimizerConfig(learning_rate=config.learning_rate)
    state = AdamState.for_params(params)
    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model_config(out_dir / "model.config", model)

    rng = np.random.default_rng(config.seed)
    log: list[LogRow] = []
    best_state: dict[str, np.ndarray] | None = None
    best_mrr = -math.inf
    evals_without_improvement = 0
    batch_index = 0
    seen_any = False
    stop = False
    param_names = list(model.named_parameters())

    def full_state() -> dict[str, np.ndarray]:
        """Model tensors plus the optimizer accumulators, for resumable files."""
        snapshot = model.state_dict()
        for name, m, v in zip(param_names, state.first_moment, state.second_moment):
            snapshot[f"adam/{name}/m"] = m.copy()
            snapshot[f"adam/{name}/v"] = v.copy()
        return snapshot

    def finish_batch(batch: list[TrainingTriple]) -> None:
        nonlocal batch_index, best_state, best_mrr, evals_without_improvement, stop
        batch_index += 1
        loss = _train_batch(model, params, batch, vocabulary, state, opt_config, config.margin)
        if batch_index % config.eval_every != 0:
            log.append(LogRow(batch_index, loss, None))
            return
        mrr = validation_mrr(model, validation, vocabulary, config.rerank_depth)
        log.append(LogRow(batch_index, loss, mrr))
        if out_dir is not None:
            save_checkpoint(out_dir / f"step_{batch_index}.ckpt", full_state(), batch_index)
        if mrr > best_mrr:
            best_mrr = mrr
            best_state = full_state()
            evals_without_improvement = 0
        else:
            evals_without_improvement += 1
            if evals_without_improvement >= config.patience:
                stop = True

    for _ in range(config.epochs):
        source: Iterable[TrainingTriple] = triples
        if config.shuffle:
            shuffled = list(triples)
            rng.shuffle(shuffled)  # type: ignore[arg-type]
            source = shuffled
        batch: list[TrainingTriple] = []
        for triple in source:
            seen_any = True
            batch.append(triple)
            if len(batch) == config.batch_size:
                finish_batch(batch)
                batch = []
                if stop:
                    break
        if batch and not stop:
            finish_batch(batch)
        if stop:
            break

    if not seen_any:
        raise DataError("empty triple stream")

    if not log or log[-1].val_mrr is None:
        mrr = validation_mrr(model, validation, vocabulary, config.rerank_depth)
        last_loss = log[-1].loss if log else math.nan
        if log and log[-1].batch == batch_index:
            log[-1] = LogRow(batch_index, last_loss, mrr)
        else:
            log.append(LogRow(batch_index, last_loss, mrr))
        if out_dir is not None:
            save_checkpoint(out_dir / f"step_{batch_index}.ckpt", full_state(), batch_index)
        if mrr > best_mrr:
            best_mrr = mrr
            best_state = full_state()

    assert best_state is not None
    model.load_state_dict(best_state)
    if out_dir is not None:
        save_checkpoint(out_dir / "best.ckpt", best_state, batch_index)
    return TrainResult(best_state, best_mrr, log, batch_index)


def write_training_log(path: str | Path, rows: list[LogRow], header: list[str] | None = None) -> None:
    """TSV log: `batch<TAB>loss<TAB>val_mrr` (val_mrr is NA between evaluations)."""
    with Path(path).open("w", encoding="utf-8") as f:
        for line in header or []:
            f.write(f"# {line}\n")
        f.write("batch\tloss\tval_mrr\n")
        for row in rows:
            mrr = "NA" if row.val_mrr is None else repr(row.val_mrr)
            f.write(f"{row.batch}\t{row.loss!r}\t{mrr}\n")
