"""End-to-end glue: corpus -> prompts -> training -> offline evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .encoder import Encoder, EncoderConfig, embed, init_params
from .evaluation import (
    EmbeddingRetriever,
    EvalConfig,
    RandomRetriever,
    RecallReport,
    popularity_correlation,
    recall_at_k,
)
from .negatives import SamplerConfig, build_impression_map
from .objectives import LossConfig
from .prompts import (
    ALL_MARKERS,
    SYSTEM_PROMPT,
    PromptOptions,
    member_feature_texts,
    post_feature_texts,
    render_member_prompt,
    render_post_prompt,
)
from .synth import Corpus, GenConfig, RankingOracle
from .tokenizer import Vocab, build_vocab
from .trainer import FitResult, TokenTables, TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass
class PromptTables(TokenTables):
    vocab: Vocab | None = None
    options: PromptOptions | None = None


def corpus_texts(corpus: Corpus, opts: PromptOptions) -> list[str]:
    texts = [SYSTEM_PROMPT]
    for post in corpus.items.values():
        texts.extend(t for _, t in post_feature_texts(post, opts))
    for m in corpus.members.values():
        texts.extend(t for _, t in member_feature_texts(m))
    return texts


def build_prompt_tables(corpus: Corpus, opts: PromptOptions, max_vocab: int | None = 6000) -> PromptTables:
    """Vocabulary plus token ids for every item and member prompt."""
    vocab = build_vocab(corpus_texts(corpus, opts), ALL_MARKERS, max_vocab)
    items = {iid: render_post_prompt(p, vocab, opts) for iid, p in corpus.items.items()}
    members = {
        mid: render_member_prompt(m, corpus.history.get(mid, ()), vocab, opts.max_context, opts, post_cache=items)
        for mid, m in corpus.members.items()
    }
    return PromptTables(
        member_tokens={k: v.token_ids for k, v in members.items()},
        item_tokens={k: v.token_ids for k, v in items.items()},
        vocab=vocab,
        options=opts,
    )


@dataclass(frozen=True)
class ModelOptions:
    """Encoder settings other than the vocabulary size (which comes from the data)."""

    hidden_dim: int = 64
    num_layers: int = 1
    num_heads: int = 4
    arch: str = "bag_mlp"
    mlp_ratio: int = 2
    pooling: str = "mean"
    last_n: int | None = None
    projection: str | None = None
    projection_dim: int | None = None
    dtype: str = "float32"
    seed: int = 0

    def encoder_config(self, vocab_size: int, max_context: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, max_context=max_context, **asdict(self))


@dataclass(frozen=True)
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    prompts: PromptOptions = field(default_factory=lambda: PromptOptions(truncate_post_tokens=60))
    max_vocab: int | None = 6000
    model: ModelOptions = field(default_factory=ModelOptions)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    eval_dims: tuple[int, ...] | None = None

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "prompts": asdict(self.prompts),
            "max_vocab": self.max_vocab,
            "model": asdict(self.model),
            "loss": self.loss.to_dict(),
            "sampler": asdict(self.sampler),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "eval_dims": list(self.eval_dims) if self.eval_dims else None,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config sections: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        sections = {
            "data": GenConfig, "prompts": PromptOptions, "model": ModelOptions, "loss": LossConfig,
            "sampler": SamplerConfig, "train": TrainConfig, "eval": EvalConfig,
        }
        for name, typ in sections.items():
            if name in d:
                sec = dict(d[name])
                if name == "loss":
                    for key in ("mrl_dims", "mrl_weights"):
                        if sec.get(key) is not None:
                            sec[key] = tuple(sec[key])
                try:
                    kw[name] = typ(**sec)
                except TypeError as exc:
                    raise ValueError(f"config section {name!r}: {exc}") from None
        if "max_vocab" in d:
            kw["max_vocab"] = d["max_vocab"]
        if d.get("eval_dims"):
            kw["eval_dims"] = tuple(d["eval_dims"])
        return cls(**kw)


def load_run_config(path: str | Path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw)


# -- evaluation ----------------------------------------------------------------


def eval_members(corpus: Corpus, cfg: EvalConfig) -> list[str]:
    members = sorted(corpus.eval_sessions)
    if cfg.sample_size is not None and cfg.sample_size < len(members):
        rng = np.random.default_rng(cfg.seed)
        members = sorted(rng.choice(members, size=cfg.sample_size, replace=False).tolist())
    return members


def embed_for_eval(model: Encoder, tables: TokenTables, members: Sequence[str], items: Sequence[str]):
    m_vecs = embed(model, [tables.member_tokens[m] for m in members])
    i_vecs = embed(model, [tables.item_tokens[i] for i in items])
    return dict(zip(members, m_vecs)), dict(zip(items, i_vecs))


@dataclass
class EvalResult:
    reports: dict[int, RecallReport]
    popularity_corr: dict[int, float]

    def recall(self, dim: int | None = None) -> float:
        dim = max(self.reports) if dim is None else dim
        return self.reports[dim].mean


def evaluate_model(
    model: Encoder | None,
    tables: TokenTables | None,
    corpus: Corpus,
    cfg: EvalConfig,
    dims: Sequence[int] | None = None,
    retriever=None,
) -> EvalResult:
    """Recall@k (per prefix dim) and popularity correlation on the eval sessions.

    Pass ``retriever`` to score with something other than ``model``.
    """
    if corpus.truth is None:
        raise ValueError("evaluation needs the latent truth for the ranking oracle")
    members = eval_members(corpus, cfg)
    pools = {m: corpus.eval_sessions[m] for m in members}
    oracle = RankingOracle(corpus.truth)
    pairs = [(m, i) for m in members for i in pools[m]]
    pop_of = dict(zip(corpus.truth.item_ids, corpus.truth.popularity.tolist()))
    reports: dict[int, RecallReport] = {}
    corrs: dict[int, float] = {}
    if retriever is not None:
        dim = getattr(retriever, "dim", 0) or 0
        reports[dim] = recall_at_k(pools, oracle, retriever, cfg.n, cfg.k)
        corrs[dim] = popularity_correlation(pairs, retriever, pop_of)
        return EvalResult(reports, corrs)
    items = sorted({i for p in pools.values() for i in p})
    m_emb, i_emb = embed_for_eval(model, tables, members, items)
    full = model.config.output_dim
    for dim in dims or (full,):
        r = EmbeddingRetriever(m_emb, i_emb, dim=dim)
        reports[dim] = recall_at_k(pools, oracle, r, cfg.n, cfg.k)
        corrs[dim] = popularity_correlation(pairs, r, pop_of)
    return EvalResult(reports, corrs)


# -- experiments -------------------------------------------------------------


@dataclass
class RunResult:
    config: RunConfig
    fit: FitResult | None
    eval: EvalResult
    model: Encoder | None = None
    tables: PromptTables | None = None


def run_experiment(
    cfg: RunConfig,
    corpus: Corpus,
    tables: PromptTables | None = None,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
) -> RunResult:
    """Train one configuration on ``corpus`` and evaluate it."""
    if tables is None:
        tables = build_prompt_tables(corpus, cfg.prompts, cfg.max_vocab)
    enc_cfg = cfg.model.encoder_config(tables.vocab.size, max(cfg.prompts.max_context, 1))
    model = init_params(enc_cfg)
    imp_map = build_impression_map(corpus.engagement_log)
    catalog = sorted(corpus.items) if cfg.sampler.num_uniform else None

    def eval_fn(m: Encoder, step: int) -> dict:
        res = evaluate_model(m, tables, corpus, cfg.eval)
        return {f"recall@{cfg.eval.k}": res.recall(), "popularity_corr": res.popularity_corr[max(res.reports)]}

    fit_res = fit(
        model, corpus.train_pairs, tables, imp_map, cfg.loss, cfg.sampler, cfg.train,
        catalog=catalog, eval_fn=eval_fn, checkpoint_path=checkpoint_path, metrics_path=metrics_path,
        resume=resume, stop_after=stop_after,
    )
    result = evaluate_model(model, tables, corpus, cfg.eval, dims=cfg.eval_dims)
    return RunResult(cfg, fit_res, result, model, tables)


def random_baseline(corpus: Corpus, cfg: EvalConfig, dim: int = 64, seed: int = 0) -> EvalResult:
    return evaluate_model(None, None, corpus, cfg, retriever=RandomRetriever(dim, seed))
