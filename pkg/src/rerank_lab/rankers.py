"""The three neural scoring functions: KNRM, CONV-KNRM and MatchPyramid.

All models map (query ids, document ids) to a scalar relevance score and are
differentiable end to end, embeddings included. Inputs longer than the
configured maximums are truncated, never wrapped. Score heads start at zero
weight/zero bias (symmetric start, deterministic); convolution and hidden
projection weights are seeded uniform in +/- sqrt(1/fan_in).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import KernelBank, Tensor
from .corpus import PAD_ID
from .embeddings import EmbeddingTable


@dataclass
class ModelInputConfig:
    max_query_length: int = 30
    max_doc_length: int = 180

    def __post_init__(self) -> None:
        if self.max_query_length < 1 or self.max_doc_length < 1:
            raise ValueError("maximum lengths must be >= 1")


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class RankerBase:
    """Shared input handling and parameter bookkeeping."""

    model_type = "base"

    def __init__(self, embedding: EmbeddingTable, input_config: ModelInputConfig | None):
        self.embedding = embedding
        self.input_config = input_config or ModelInputConfig()
        self.weights = ag.parameter(embedding.matrix)  # shares the table's buffer

    def _prepare(self, q_ids, d_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        q = np.asarray(q_ids, dtype=np.int64)[: self.input_config.max_query_length]
        d = np.asarray(d_ids, dtype=np.int64)[: self.input_config.max_doc_length]
        q_mask = q != PAD_ID
        d_mask = d != PAD_ID
        if not q_mask.any():
            raise ValueError("query is empty after truncation")
        if not d_mask.any():
            raise ValueError("document is empty after truncation")
        return q, d, q_mask, d_mask

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def score_ids(self, q_ids, d_ids) -> Tensor:
        raise NotImplementedError

    def score(self, q_ids, d_ids) -> float:
        return self.score_ids(q_ids, d_ids).item()

    def config_dict(self) -> dict[str, str]:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {missing}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.data[...] = arr


class KnrmModel(RankerBase):
    """Cosine match matrix -> Gaussian kernel pooling -> linear score."""

    model_type = "knrm"

    def __init__(
        self,
        embedding: EmbeddingTable,
        bank: KernelBank | None = None,
        input_config: ModelInputConfig | None = None,
    ):
        super().__init__(embedding, input_config)
        self.bank = bank or KernelBank.default()
        self.w_out = ag.parameter(np.zeros((self.bank.count, 1), dtype=np.float32))
        self.b_out = ag.parameter(np.zeros(1, dtype=np.float32))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"embedding": self.weights, "w_out": self.w_out, "b_out": self.b_out}

    def kernel_features(self, q_ids, d_ids) -> Tensor:
        q, d, q_mask, d_mask = self._prepare(q_ids, d_ids)
        q_emb = ag.embedding_lookup(self.weights, q)
        d_emb = ag.embedding_lookup(self.weights, d)
        m = ag.cosine_match_matrix(q_emb, d_emb, q_mask, d_mask)
        return ag.gaussian_kernel_pool(m, self.bank, q_mask, d_mask)

    def score_ids(self, q_ids, d_ids) -> Tensor:
        return ag.linear(self.kernel_features(q_ids, d_ids), self.w_out, self.b_out)

    def config_dict(self) -> dict[str, str]:
        return {
            "type": self.model_type,
            "embedding_dim": str(self.embedding.dim),
            "kernel_means": ",".join(repr(float(v)) for v in self.bank.means),
            "kernel_sigmas": ",".join(repr(float(v)) for v in self.bank.sigmas),
            "max_query_length": str(self.input_config.max_query_length),
            "max_doc_length": str(self.input_config.max_doc_length),
        }


def _windowed_mask(mask: np.ndarray, n: int) -> np.ndarray:
    """Valid n-gram start positions: windows lying fully on non-PAD tokens."""
    length = len(mask)
    out = np.zeros(length, dtype=bool)
    if length - n + 1 > 0:
        stacked = [mask[k : k + length - n + 1] for k in range(n)]
        out[: length - n + 1] = np.logical_and.reduce(stacked)
    return out


class ConvKnrmModel(RankerBase):
    """KNRM over learned word n-gram representations, all n-gram pairs crossed."""

    model_type = "conv_knrm"

    def __init__(
        self,
        embedding: EmbeddingTable,
        bank: KernelBank | None = None,
        channels: int = 128,
        ngram_sizes: tuple[int, ...] = (1, 2, 3),
        input_config: ModelInputConfig | None = None,
        seed: int = 0,
    ):
        super().__init__(embedding, input_config)
        self.bank = bank or KernelBank.default()
        self.channels = channels
        self.ngram_sizes = tuple(ngram_sizes)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.conv_w: dict[int, Tensor] = {}
        self.conv_b: dict[int, Tensor] = {}
        for n in self.ngram_sizes:
            self.conv_w[n] = ag.parameter(
                _uniform_init(rng, (n, embedding.dim, channels), fan_in=n * embedding.dim)
            )
            self.conv_b[n] = ag.parameter(np.zeros(channels, dtype=np.float32))
        feature_count = len(self.ngram_sizes) ** 2 * self.bank.count
        self.w_out = ag.parameter(np.zeros((feature_count, 1), dtype=np.float32))
        self.b_out = ag.parameter(np.zeros(1, dtype=np.float32))

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {"embedding": self.weights}
        for n in self.ngram_sizes:
            named[f"conv{n}/w"] = self.conv_w[n]
            named[f"conv{n}/b"] = self.conv_b[n]
        named["w_out"] = self.w_out
        named["b_out"] = self.b_out
        return named

    def _ngram_reps(self, emb: Tensor, mask: np.ndarray) -> dict[int, tuple[Tensor, np.ndarray]]:
        reps = {}
        for n in self.ngram_sizes:
            rep = ag.relu(ag.conv1d(emb, self.conv_w[n], self.conv_b[n]))
            reps[n] = (rep, _windowed_mask(mask, n))
        return reps

    def cross_features(self, q_ids, d_ids) -> Tensor:
        q, d, q_mask, d_mask = self._prepare(q_ids, d_ids)
        q_reps = self._ngram_reps(ag.embedding_lookup(self.weights, q), q_mask)
        d_reps = self._ngram_reps(ag.embedding_lookup(self.weights, d), d_mask)
        blocks: list[Tensor] = []
        for nq in self.ngram_sizes:
            q_rep, qm = q_reps[nq]
            for nd in self.ngram_sizes:
                d_rep, dm = d_reps[nd]
                if not qm.any() or not dm.any():
                    # Too few tokens for this n-gram size: neutral features.
                    blocks.append(Tensor(np.zeros(self.bank.count, dtype=np.float32)))
                    continue
                m = ag.cosine_match_matrix(q_rep, d_rep, qm, dm)
                blocks.append(ag.gaussian_kernel_pool(m, self.bank, qm, dm))
        return ag.concat(blocks, axis=0)

    def score_ids(self, q_ids, d_ids) -> Tensor:
        return ag.linear(self.cross_features(q_ids, d_ids), self.w_out, self.b_out)

    def config_dict(self) -> dict[str, str]:
        return {
            "type": self.model_type,
            "embedding_dim": str(self.embedding.dim),
            "channels": str(self.channels),
            "ngram_sizes": ",".join(str(n) for n in self.ngram_sizes),
            "kernel_means": ",".join(repr(float(v)) for v in self.bank.means),
            "kernel_sigmas": ",".join(repr(float(v)) for v in self.bank.sigmas),
            "max_query_length": str(self.input_config.max_query_length),
            "max_doc_length": str(self.input_config.max_doc_length),
            "seed": str(self.seed),
        }


DEFAULT_POOL_SCHEDULE = ((90, 30), (45, 15), (22, 8), (11, 4), (5, 2))


class MatchPyramidModel(RankerBase):
    """Stacked 3x3 convolutions with dynamic max pooling over the match matrix.

    The match matrix is document-major (rows = document positions) and is
    cropped to the real tokens before the pyramid, so appended PAD tokens
    cannot change the score.
    """

    model_type = "match_pyramid"

    def __init__(
        self,
        embedding: EmbeddingTable,
        channels: int = 16,
        pool_schedule: tuple[tuple[int, int], ...] = DEFAULT_POOL_SCHEDULE,
        hidden: int = 32,
        input_config: ModelInputConfig | None = None,
        seed: int = 0,
    ):
        super().__init__(embedding, input_config)
        self.channels = channels
        self.pool_schedule = tuple(tuple(g) for g in pool_schedule)
        self.hidden = hidden
        self.seed = seed
        for (h0, w0), (h1, w1) in zip(self.pool_schedule, self.pool_schedule[1:]):
            if not (h1 < h0 and w1 < w0):
                raise ValueError("pooling grids must strictly shrink layer to layer")
        rng = np.random.default_rng(seed)
        self.conv_w: list[Tensor] = []
        self.conv_b: list[Tensor] = []
        c_in = 1
        for _ in self.pool_schedule:
            self.conv_w.append(
                ag.parameter(_uniform_init(rng, (3, 3, c_in, channels), fan_in=9 * c_in))
            )
            self.conv_b.append(ag.parameter(np.zeros(channels, dtype=np.float32)))
            c_in = channels
        final_h, final_w = self.pool_schedule[-1]
        flat = final_h * final_w * channels
        self.w_hidden = ag.parameter(_uniform_init(rng, (flat, hidden), fan_in=flat))
        self.b_hidden = ag.parameter(np.zeros(hidden, dtype=np.float32))
        self.w_out = ag.parameter(np.zeros((hidden, 1), dtype=np.float32))
        self.b_out = ag.parameter(np.zeros(1, dtype=np.float32))

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {"embedding": self.weights}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b), start=1):
            named[f"conv{i}/w"] = w
            named[f"conv{i}/b"] = b
        named.update(
            {
                "w_hidden": self.w_hidden,
                "b_hidden": self.b_hidden,
                "w_out": self.w_out,
                "b_out": self.b_out,
            }
        )
        return named

    def pyramid_features(self, q_ids, d_ids) -> Tensor:
        q, d, q_mask, d_mask = self._prepare(q_ids, d_ids)
        q_real = q[q_mask]
        d_real = d[d_mask]
        q_emb = ag.embedding_lookup(self.weights, q_real)
        d_emb = ag.embedding_lookup(self.weights, d_real)
        m = ag.cosine_match_matrix(d_emb, q_emb)  # document-major
        x = ag.reshape(m, (len(d_real), len(q_real), 1))
        for w, b, (grid_h, grid_w) in zip(self.conv_w, self.conv_b, self.pool_schedule):
            x = ag.dynamic_max_pool(ag.relu(ag.conv2d(x, w, b)), grid_h, grid_w)
        final_h, final_w = self.pool_schedule[-1]
        flat = ag.reshape(x, (final_h * final_w * self.channels,))
        return ag.relu(ag.linear(flat, self.w_hidden, self.b_hidden))

    def score_ids(self, q_ids, d_ids) -> Tensor:
        return ag.linear(self.pyramid_features(q_ids, d_ids), self.w_out, self.b_out)

    def config_dict(self) -> dict[str, str]:
        return {
            "type": self.model_type,
            "embedding_dim": str(self.embedding.dim),
            "channels": str(self.channels),
            "pool_schedule": ";".join(f"{h}x{w}" for h, w in self.pool_schedule),
            "hidden": str(self.hidden),
            "max_query_length": str(self.input_config.max_query_length),
            "max_doc_length": str(self.input_config.max_doc_length),
            "seed": str(self.seed),
        }


MODEL_TYPES = {
    "knrm": KnrmModel,
    "conv_knrm": ConvKnrmModel,
    "match_pyramid": MatchPyramidModel,
}


def save_model_config(path: str | Path, model: RankerBase) -> None:
    with Path(path).open("w", encoding="utf-8") as f:
        for key, value in model.config_dict().items():
            f.write(f"{key}={value}\n")


def load_model_config(path: str | Path) -> dict[str, str]:
    config: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            config[key] = value
    return config


def build_model(
    model_type: str,
    embedding: EmbeddingTable,
    input_config: ModelInputConfig | None = None,
    seed: int = 0,
    bank: KernelBank | None = None,
    **kwargs,
) -> RankerBase:
    if model_type == "knrm":
        return KnrmModel(embedding, bank=bank, input_config=input_config)
    if model_type == "conv_knrm":
        return ConvKnrmModel(
            embedding, bank=bank, input_config=input_config, seed=seed, **kwargs
        )
    if model_type == "match_pyramid":
        return MatchPyramidModel(embedding, input_config=input_config, seed=seed, **kwargs)
    raise ValueError(f"unknown model type {model_type!r}")


def model_from_config(config: dict[str, str], embedding: EmbeddingTable) -> RankerBase:
    """Rebuild a model from a persisted key-value config file."""
    input_config = ModelInputConfig(
        max_query_length=int(config.get("max_query_length", 30)),
        max_doc_length=int(config.get("max_doc_length", 180)),
    )
    bank = None
    if "kernel_means" in config:
        bank = KernelBank(
            np.array([float(v) for v in config["kernel_means"].split(",")]),
            np.array([float(v) for v in config["kernel_sigmas"].split(",")]),
        )
    model_type = config["type"]
    seed = int(config.get("seed", 0))
    if model_type == "knrm":
        return KnrmModel(embedding, bank=bank, input_config=input_config)
    if model_type == "conv_knrm":
        return ConvKnrmModel(
            embedding,
            bank=bank,
            channels=int(config.get("channels", 128)),
            ngram_sizes=tuple(int(n) for n in config.get("ngram_sizes", "1,2,3").split(",")),
            input_config=input_config,
            seed=seed,
        )
    if model_type == "match_pyramid":
        schedule = tuple(
            tuple(int(v) for v in grid.split("x"))
            for grid in config.get("pool_schedule", "90x30;45x15;22x8;11x4;5x2").split(";")
        )
        return MatchPyramidModel(
            embedding,
            channels=int(config.get("channels", 16)),
            pool_schedule=schedule,
            hidden=int(config.get("hidden", 32)),
            input_config=input_config,
            seed=seed,
        )
    raise ValueError(f"unknown model type {model_type!r}")
