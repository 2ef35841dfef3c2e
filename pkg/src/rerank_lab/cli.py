"""Command-line pipeline: one TOML config file, reproducible run directories.

Every command prints its effective configuration (with its hash) and seed,
and stamps that hash into each output, either as `#`-prefixed header lines
(TSV outputs) or as a `<output>.meta` sidecar (TREC runs, checkpoints,
binary files). Exit codes: 0 success, 2 missing input file, 3 data
invariant violation, 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import evaluation, firststage
from .autograd import KernelBank
from .checkpoint import load_checkpoint
from .corpus import (
    DataError,
    Vocabulary,
    build_vocabulary,
    load_candidates,
    load_collection,
    load_qrels,
    load_queries,
    oov_query_stats,
)
from .embeddings import EmbeddingTable, load_pretrained, random_table
from .evaluation import (
    format_bytes,
    frequency_bucket_mrr,
    memory_footprint,
    mrr_at_k,
    paired_ttest,
    recall_at_k,
    rerank_all,
    sweep_threshold,
    worker_count,
    write_bucket_curve,
    write_per_query,
    write_significance,
    write_threshold_curve,
)
from .firststage import BM25Params, InvertedIndex, build_index, retrieve
from .rankers import (
    ModelInputConfig,
    RankerBase,
    build_model,
    load_model_config,
    model_from_config,
)
from .training import TrainConfig, TripleReader, ValidationSet, train, write_training_log

DEFAULTS: dict[str, dict] = {
    "seed": 42,
    "paths": {
        "collection": "",
        "queries": "",
        "qrels": "",
        "candidates": "",
        "first_stage_run": "",
        "triples": "",
        "embeddings": "",
        "vocabulary": "",
        "index": "",
        "out_dir": "out",
    },
    "vocabulary": {"min_frequency": 1},
    "bm25": {"k1": 0.6, "b": 0.8},
    "model": {
        "type": "knrm",
        "embedding_dim": 300,
        "exact_match_sigma": 0.1,
        "conv_channels": 128,
        "ngram_sizes": "1,2,3",
        "pyramid_channels": 16,
        "pool_schedule": "90x30;45x15;22x8;11x4;5x2",
        "hidden": 32,
        "max_query_length": 30,
        "max_doc_length": 180,
    },
    "train": {
        "batch_size": 64,
        "epochs": 1,
        "learning_rate": 0.001,
        "margin": 1.0,
        "eval_every": 5000,
        "patience": 2,
        "shuffle": False,
        "rerank_depth": 300,
    },
    "eval": {
        "threshold_min": 1,
        "threshold_max": 300,
        "rerank_depth": 300,
        "metric_k": 10,
        "candidate_depth": 1000,
        "bucket_min": 1,
        "bucket_max": 200,
    },
}


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _parse_override_value(raw: str):
    for caster in (int, float):
        try:
            return caster(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def load_config(path: str | None, overrides: list[str]) -> dict:
    config = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    if path:
        with Path(path).open("rb") as f:
            config = _merge(config, tomllib.load(f))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        value = _parse_override_value(raw)
        parts = key.split(".")
        target = config
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return config


def flatten_config(config: dict) -> list[str]:
    lines = []
    for key in sorted(config):
        value = config[key]
        if isinstance(value, dict):
            for sub in sorted(value):
                lines.append(f"{key}.{sub}={value[sub]!r}")
        else:
            lines.append(f"{key}={value!r}")
    return lines


def config_hash(config: dict) -> str:
    payload = "\n".join(flatten_config(config)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def print_config(config: dict, command: str) -> None:
    print(f"command={command} config_hash={config_hash(config)} seed={config['seed']}")
    for line in flatten_config(config):
        print(f"config {line}")


def _meta_lines(config: dict, command: str) -> list[str]:
    return [f"config_hash={config_hash(config)}", f"seed={config['seed']}", f"command={command}"]


def write_sidecar(path: Path, config: dict, command: str) -> None:
    with Path(str(path) + ".meta").open("w", encoding="utf-8") as f:
        for line in _meta_lines(config, command):
            f.write(line + "\n")


def _path(config: dict, key: str, must_exist: bool = True) -> Path:
    raw = config["paths"].get(key, "")
    if not raw:
        raise FileNotFoundError(f"no path configured for paths.{key}")
    path = Path(raw)
    if must_exist and not path.exists():
        raise FileNotFoundError(f"missing input file: {path} (paths.{key})")
    return path


def _out_dir(config: dict) -> Path:
    out = Path(config["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bm25_params(config: dict) -> BM25Params:
    return BM25Params(k1=float(config["bm25"]["k1"]), b=float(config["bm25"]["b"]))


def _input_config(config: dict) -> ModelInputConfig:
    model = config["model"]
    return ModelInputConfig(
        max_query_length=int(model["max_query_length"]),
        max_doc_length=int(model["max_doc_length"]),
    )


def _build_model_from_config(config: dict, embedding: EmbeddingTable) -> RankerBase:
    model_cfg = config["model"]
    bank = KernelBank.default(exact_sigma=float(model_cfg["exact_match_sigma"]))
    model_type = model_cfg["type"]
    kwargs: dict = {}
    if model_type == "conv_knrm":
        kwargs["channels"] = int(model_cfg["conv_channels"])
        kwargs["ngram_sizes"] = tuple(int(n) for n in str(model_cfg["ngram_sizes"]).split(","))
    if model_type == "match_pyramid":
        kwargs["channels"] = int(model_cfg["pyramid_channels"])
        kwargs["pool_schedule"] = tuple(
            tuple(int(v) for v in grid.split("x"))
            for grid in str(model_cfg["pool_schedule"]).split(";")
        )
        kwargs["hidden"] = int(model_cfg["hidden"])
        bank = None
    return build_model(
        model_type,
        embedding,
        input_config=_input_config(config),
        seed=int(config["seed"]),
        bank=bank,
        **kwargs,
    )


def _load_embedding(config: dict, vocabulary: Vocabulary) -> EmbeddingTable:
    dim = int(config["model"]["embedding_dim"])
    seed = int(config["seed"])
    raw = config["paths"].get("embeddings", "")
    if raw:
        return load_pretrained(_path(config, "embeddings"), vocabulary, dim, seed=seed)
    return random_table(vocabulary, dim, seed=seed)


def _load_model_from_checkpoint(checkpoint: Path, config: dict) -> RankerBase:
    state, _ = load_checkpoint(checkpoint)
    model_config_path = checkpoint.parent / "model.config"
    if not model_config_path.exists():
        raise FileNotFoundError(f"missing input file: {model_config_path}")
    model_config = load_model_config(model_config_path)
    matrix = state["embedding"]
    table = EmbeddingTable(matrix.copy(), matrix.shape[1])
    model = model_from_config(model_config, table)
    model.load_state_dict(state)
    return model


def _scorer(model: RankerBase, vocabulary: Vocabulary):
    def score(query_tokens: list[str], doc_tokens: list[str]) -> float:
        return model.score(vocabulary.ids_for(query_tokens), vocabulary.ids_for(doc_tokens))

    return score


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_index(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    index = build_index(load_collection(_path(config, "collection")))
    out = out_dir / "index.txt"
    index.save(out)
    write_sidecar(out, config, "build-index")
    print(
        f"indexed docs={index.doc_count} avg_doc_length={index.avg_doc_length!r} -> {out}"
    )


def cmd_build_vocab(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    min_frequency = int(config["vocabulary"]["min_frequency"])
    vocabulary = build_vocabulary(
        load_collection(_path(config, "collection")),
        min_frequency,
        shard_count=worker_count(),
    )
    vocab_path = config["paths"].get("vocabulary", "") or str(out_dir / "vocab.tsv")
    vocabulary.save(vocab_path)
    write_sidecar(Path(vocab_path), config, "build-vocab")

    name = "Voc-Full" if min_frequency == 1 else f"Voc-{min_frequency}"
    dim = int(config["model"]["embedding_dim"])
    footprint = memory_footprint(vocabulary.term_count, dim)
    columns = [
        "name", "min_frequency", "terms", "covered_terms_percent",
        "footprint_bytes", "footprint", "oov_query_percent", "oov_query_count",
    ]
    oov_percent: float | str = "NA"
    oov_count: int | str = "NA"
    if config["paths"].get("queries", ""):
        oov_percent_val, oov_count = oov_query_stats(
            load_queries(_path(config, "queries")), vocabulary
        )
        oov_percent = repr(oov_percent_val)
    row = [
        name, min_frequency, vocabulary.term_count,
        repr(vocabulary.coverage_percent()), footprint, format_bytes(footprint),
        oov_percent, oov_count,
    ]
    report_path = out_dir / "vocab_report.tsv"
    with report_path.open("w", encoding="utf-8") as f:
        for line in _meta_lines(config, "build-vocab"):
            f.write(f"# {line}\n")
        f.write("\t".join(columns) + "\n")
        f.write("\t".join(str(c) for c in row) + "\n")
    print(f"vocabulary {name}: terms={vocabulary.term_count} "
          f"coverage={vocabulary.coverage_percent():.1f}% footprint={format_bytes(footprint)} "
          f"oov_queries={oov_count} ({oov_percent}%) -> {vocab_path}")


def cmd_retrieve(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    k = args.k if args.k is not None else int(config["eval"]["candidate_depth"])
    index_path = config["paths"].get("index", "") or str(Path(config["paths"]["out_dir"]) / "index.txt")
    if not Path(index_path).exists():
        raise FileNotFoundError(f"missing input file: {index_path} (paths.index)")
    index = InvertedIndex.load(index_path)
    params = _bm25_params(config)
    doc_tokens = {
        doc.doc_id: doc.tokens for doc in load_collection(_path(config, "collection"))
    }
    queries = list(load_queries(_path(config, "queries")))

    run_path = out_dir / "bm25.trec"
    candidates_path = out_dir / "candidates.tsv"
    degenerate = 0
    with candidates_path.open("w", encoding="utf-8") as cand_file:
        runs = []
        for query in queries:
            if query.degenerate:
                degenerate += 1
                continue
            ranked = retrieve(query.tokens, index, params, k, query_id=query.query_id)
            runs.append(ranked)
            query_text = " ".join(query.tokens)
            for doc_id, _ in ranked.entries:
                doc_text = " ".join(doc_tokens[doc_id])
                cand_file.write(f"{query.query_id}\t{doc_id}\t{query_text}\t{doc_text}\n")
        firststage.write_run(run_path, runs, tag="bm25")
    write_sidecar(run_path, config, "retrieve")
    write_sidecar(candidates_path, config, "retrieve")
    print(f"retrieved k={k} queries={len(queries) - degenerate} "
          f"degenerate={degenerate} -> {run_path}, {candidates_path}")


def _validation_set(config: dict) -> ValidationSet:
    candidates = load_candidates(_path(config, "candidates"))
    qrels = load_qrels(_path(config, "qrels"))
    return ValidationSet(candidates, qrels)


def cmd_train(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    vocabulary = Vocabulary.load(_path(config, "vocabulary"))
    embedding = _load_embedding(config, vocabulary)
    model = _build_model_from_config(config, embedding)
    train_cfg = config["train"]
    tc = TrainConfig(
        batch_size=int(train_cfg["batch_size"]),
        epochs=int(train_cfg["epochs"]),
        learning_rate=float(train_cfg["learning_rate"]),
        margin=float(train_cfg["margin"]),
        eval_every=int(train_cfg["eval_every"]),
        patience=int(train_cfg["patience"]),
        seed=int(config["seed"]),
        shuffle=bool(train_cfg["shuffle"]),
        rerank_depth=int(train_cfg["rerank_depth"]),
    )
    reader = TripleReader(_path(config, "triples"), _input_config(config))
    run_dir = out_dir / args.run_name
    result = train(model, reader, _validation_set(config), vocabulary, tc, run_dir=run_dir)
    log_path = run_dir / "training_log.tsv"
    write_training_log(log_path, result.log, header=_meta_lines(config, "train"))
    write_sidecar(run_dir / "best.ckpt", config, "train")
    print(f"trained batches={result.batches} skipped_triples={reader.skipped} "
          f"best_val_mrr={result.best_mrr!r} -> {run_dir}")


def _attach_first_stage_scores(config: dict, candidates: dict) -> None:
    raw = config["paths"].get("first_stage_run", "")
    if not raw:
        return
    runs = firststage.read_run(_path(config, "first_stage_run"))
    for query_id, pool in candidates.items():
        run = runs.get(query_id)
        if run is None:
            continue
        by_doc = dict(run.entries)
        try:
            pool.scores = [by_doc[doc_id] for doc_id, _ in pool.entries]
        except KeyError as exc:
            raise DataError(
                f"first-stage run is missing doc {exc} for query {query_id}"
            ) from exc


def cmd_rerank(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    vocabulary = Vocabulary.load(_path(config, "vocabulary"))
    model = _load_model_from_checkpoint(Path(args.checkpoint), config)
    candidates = load_candidates(_path(config, "candidates"))
    _attach_first_stage_scores(config, candidates)
    depth = args.threshold if args.threshold is not None else int(config["eval"]["rerank_depth"])
    runs = rerank_all(_scorer(model, vocabulary), candidates, depth)
    run_path = out_dir / f"rerank_T{depth}.trec"
    firststage.write_run(run_path, [runs[q] for q in sorted(runs)], tag=f"rerank-T{depth}")
    write_sidecar(run_path, config, "rerank")
    print(f"re-ranked queries={len(runs)} threshold={depth} -> {run_path}")


def cmd_evaluate(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    runs = firststage.read_run(Path(args.run))
    qrels = load_qrels(_path(config, "qrels"))
    k = int(config["eval"]["metric_k"])
    rr = mrr_at_k(runs, qrels, k=k)
    recall = recall_at_k(runs, qrels, k=k)
    stem = Path(args.run).stem
    per_query_path = out_dir / f"{stem}.perquery.tsv"
    write_per_query(per_query_path, rr, recall, header_meta=_meta_lines(config, "evaluate"))
    metrics_path = out_dir / f"{stem}.metrics.tsv"
    with metrics_path.open("w", encoding="utf-8") as f:
        for line in _meta_lines(config, "evaluate"):
            f.write(f"# {line}\n")
        f.write("metric\tvalue\tevaluated\tskipped_no_relevant\n")
        f.write(f"mrr@{k}\t{rr.mean_metric!r}\t{rr.evaluated}\t{rr.skipped_no_relevant}\n")
        f.write(f"recall@{k}\t{recall.mean_metric!r}\t{recall.evaluated}\t{recall.skipped_no_relevant}\n")
    print(f"MRR@{k}={rr.mean_metric!r} Recall@{k}={recall.mean_metric!r} "
          f"evaluated={rr.evaluated} skipped_no_relevant={rr.skipped_no_relevant} "
          f"-> {per_query_path}")


def cmd_sweep(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    vocabulary = Vocabulary.load(_path(config, "vocabulary"))
    model = _load_model_from_checkpoint(Path(args.checkpoint), config)
    candidates = load_candidates(_path(config, "candidates"))
    _attach_first_stage_scores(config, candidates)
    qrels = load_qrels(_path(config, "qrels"))
    thresholds = range(int(config["eval"]["threshold_min"]), int(config["eval"]["threshold_max"]) + 1)
    result = sweep_threshold(
        _scorer(model, vocabulary), candidates, qrels, thresholds,
        k=int(config["eval"]["metric_k"]),
    )
    curve_path = out_dir / "sweep.tsv"
    write_threshold_curve(curve_path, result, header_meta=_meta_lines(config, "sweep"))
    print(f"swept thresholds={thresholds.start}..{thresholds.stop - 1} "
          f"best_T={result.best_threshold} best_mrr={result.best_mrr!r} -> {curve_path}")


def _run_name(path: str | Path) -> str:
    stem = Path(path).stem
    return stem[: -len(".perquery")] if stem.endswith(".perquery") else stem


def cmd_analyze_frequency(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    vocabulary = Vocabulary.load(_path(config, "vocabulary"))
    query_tokens = {
        q.query_id: q.tokens for q in load_queries(_path(config, "queries"))
    }
    thresholds = list(
        range(int(config["eval"]["bucket_min"]), int(config["eval"]["bucket_max"]) + 1)
    )
    curves = []
    for per_query_path in args.per_query:
        rr, _ = evaluation.read_per_query(Path(per_query_path))
        points = frequency_bucket_mrr(rr, query_tokens, vocabulary.collection_frequency, thresholds)
        stem = _run_name(per_query_path)
        bucket_path = out_dir / f"{stem}.buckets.tsv"
        write_bucket_curve(bucket_path, points, header_meta=_meta_lines(config, "analyze-frequency"))
        curves.append((stem, points))
        print(f"bucket curve for {per_query_path} -> {bucket_path}")
    if len(curves) == 2:
        (name_a, points_a), (name_b, points_b) = curves
        diff_path = out_dir / f"{name_a}_vs_{name_b}.bucket_diff.tsv"
        with diff_path.open("w", encoding="utf-8") as f:
            for line in _meta_lines(config, "analyze-frequency"):
                f.write(f"# {line}\n")
            f.write("x\tmrr_a\tmrr_b\tdiff\tcount_a\tcount_b\n")
            for pa, pb in zip(points_a, points_b):
                if pa.mrr is None or pb.mrr is None:
                    diff = "NA"
                    mrr_a = "NA" if pa.mrr is None else repr(pa.mrr)
                    mrr_b = "NA" if pb.mrr is None else repr(pb.mrr)
                else:
                    diff = repr(pa.mrr - pb.mrr)
                    mrr_a, mrr_b = repr(pa.mrr), repr(pb.mrr)
                f.write(f"{pa.threshold}\t{mrr_a}\t{mrr_b}\t{diff}\t{pa.count}\t{pb.count}\n")
        print(f"bucket difference table -> {diff_path}")


def cmd_compare(config: dict, args: argparse.Namespace) -> None:
    out_dir = _out_dir(config)
    rr_a, _ = evaluation.read_per_query(Path(args.per_query_a))
    rr_b, _ = evaluation.read_per_query(Path(args.per_query_b))
    p = paired_ttest(rr_a, rr_b)
    name_a = _run_name(args.per_query_a)
    name_b = _run_name(args.per_query_b)
    report = out_dir / f"{name_a}_vs_{name_b}.ttest.tsv"
    write_significance(report, name_a, name_b, p, header_meta=_meta_lines(config, "compare"))
    verdict = "significant" if p < 0.05 else "not significant"
    print(f"paired t-test p={p!r} ({verdict} at 0.05) -> {report}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rerank-lab",
        description="BM25 + neural re-ranking laboratory",
    )
    parser.add_argument("--config", help="TOML config file", default=None)
    parser.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build-index", help="index the collection").set_defaults(func=cmd_build_index)
    sub.add_parser("build-vocab", help="build the frequency-thresholded vocabulary").set_defaults(
        func=cmd_build_vocab
    )

    p = sub.add_parser("retrieve", help="BM25 retrieval: TREC run + candidates file")
    p.add_argument("--k", type=int, default=None, help="candidate pool depth")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("train", help="train the configured model")
    p.add_argument("--run-name", default="run", help="checkpoint directory name")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="re-rank candidates with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=int, default=None)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", help="score a TREC run against the qrels")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="tune the re-ranking threshold")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-frequency", help="low-frequency bucket curves")
    p.add_argument("per_query", nargs="+", help="per-query TSVs from `evaluate`")
    p.set_defaults(func=cmd_analyze_frequency)

    p = sub.add_parser("compare", help="paired t-test between two per-query TSVs")
    p.add_argument("per_query_a")
    p.add_argument("per_query_b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.set)
        print_config(config, args.command)
        args.func(config, args)
        return 0
    except FileNotFoundError as exc:
        print(f'ERROR code=2 message="{exc}"', file=sys.stderr)
        return 2
    except DataError as exc:
        print(f'ERROR code=3 message="{exc}"', file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - single-line machine-parsable failure
        print(f'ERROR code=1 message="{type(exc).__name__}: {exc}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
