"""Training loop over simulated multi-shard global batches."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .encoder import Encoder, EncoderConfig, backward
from .negatives import ImpressionMap, SamplerConfig, ShardBatch, StepExample, assemble_step
from .objectives import LossConfig, batch_loss
from .tensorfile import read_tensors, write_tensors

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    per_shard_batch_size: int = 8
    num_shards: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float | None = None
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    max_steps: int | None = None

    def __post_init__(self):
        if self.per_shard_batch_size < 1 or self.num_shards < 1:
            raise ValueError("per_shard_batch_size and num_shards must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def global_batch_size(self) -> int:
        return self.per_shard_batch_size * self.num_shards

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass(frozen=True)
class TrainingExample:
    member_id: str
    member_tokens: Sequence[int]
    positive_id: str
    positive_tokens: Sequence[int]
    negatives: tuple[tuple[str, Sequence[int], str], ...]  # (item_id, tokens, "hard"|"easy"|"uniform")


class TrainingDiverged(RuntimeError):
    pass


def make_optimizer(model: Encoder, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for _, p in model.named_tensors()]
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate)
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


def step_loss(model: Encoder, examples: Sequence[TrainingExample], loss_config: LossConfig) -> torch.Tensor:
    """Configured loss for one step, encoding each distinct prompt once."""
    if not examples:
        raise ValueError("train step needs at least one example")
    m_index: dict[str, int] = {}
    m_tokens: list[Sequence[int]] = []
    i_index: dict[str, int] = {}
    i_tokens: list[Sequence[int]] = []

    def item_col(item_id, tokens):
        if item_id not in i_index:
            i_index[item_id] = len(i_tokens)
            i_tokens.append(tokens)
        return i_index[item_id]

    rows, pos_cols, neg_cells = [], [], []
    for a, ex in enumerate(examples):
        if ex.member_id not in m_index:
            m_index[ex.member_id] = len(m_tokens)
            m_tokens.append(ex.member_tokens)
        rows.append(m_index[ex.member_id])
        pos_cols.append(item_col(ex.positive_id, ex.positive_tokens))
        for item_id, toks, _ in ex.negatives:
            neg_cells.append((a, item_col(item_id, toks)))

    member_emb = model(m_tokens)[torch.tensor(rows)]
    item_emb = model(i_tokens)
    neg_mask = torch.zeros(len(examples), len(i_tokens), dtype=torch.bool)
    if neg_cells:
        a_idx, c_idx = zip(*neg_cells)
        neg_mask[list(a_idx), list(c_idx)] = True
    return batch_loss(member_emb, item_emb, torch.tensor(pos_cols), neg_mask, loss_config)


def train_step(
    model: Encoder,
    examples: Sequence[TrainingExample],
    loss_config: LossConfig,
    optimizer: torch.optim.Optimizer,
    grad_clip_norm: float | None = None,
    step: int | None = None,
) -> float:
    """Forward, backward and one optimizer update; returns the loss before the update."""
    loss = step_loss(model, examples, loss_config)
    if not bool(torch.isfinite(loss)):
        ids = [(ex.member_id, ex.positive_id) for ex in examples[:8]]
        raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}; first examples {ids}")
    backward(model, loss)
    if grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_([p for _, p in model.named_tensors()], grad_clip_norm)
    optimizer.step()
    return float(loss.item())


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: Encoder,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    meta: Mapping | None = None,
) -> None:
    """Parameters (and optimizer state, when given) in one tensor file."""
    tensors = {f"param/{n}": p.detach().numpy().copy() for n, p in model.named_tensors()}
    if optimizer is not None:
        names = [n for n, _ in model.named_tensors()]
        for i, p in enumerate(p for _, p in model.named_tensors()):
            for key, val in optimizer.state.get(p, {}).items():
                tensors[f"opt/{names[i]}/{key}"] = val.detach().numpy().copy()
    header = {"encoder": model.config.to_dict(), "step": step, **(meta or {})}
    write_tensors(path, tensors, header)


def load_checkpoint(path: str | Path) -> tuple[Encoder, dict, dict[str, dict[str, np.ndarray]]]:
    """Returns ``(model, meta, optimizer_state_by_param_name)``."""
    tensors, meta = read_tensors(path)
    cfg = EncoderConfig(**meta["encoder"])
    params = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("param/")}
    model = Encoder(cfg, params)
    opt_state: dict[str, dict[str, np.ndarray]] = {}
    for k, v in tensors.items():
        if k.startswith("opt/"):
            name, key = k[len("opt/"):].rsplit("/", 1)
            opt_state.setdefault(name, {})[key] = v
    return model, meta, opt_state


def restore_optimizer(optimizer: torch.optim.Optimizer, model: Encoder, opt_state: Mapping[str, Mapping[str, np.ndarray]]) -> None:
    sd = optimizer.state_dict()
    state = {}
    for i, (name, _) in enumerate(model.named_tensors()):
        if name in opt_state:
            state[i] = {k: torch.from_numpy(np.array(v)) for k, v in opt_state[name].items()}
    sd["state"] = state
    optimizer.load_state_dict(sd)


# -- loop ----------------------------------------------------------------------


@dataclass
class TokenTables:
    member_tokens: Mapping[str, Sequence[int]]
    item_tokens: Mapping[str, Sequence[int]]


def to_training_examples(step_examples: Sequence[StepExample], tables: TokenTables) -> list[TrainingExample]:
    out = []
    it = tables.item_tokens
    for ex in step_examples:
        negs = tuple((i, it[i], "hard") for i in ex.hard)
        negs += tuple((i, it[i], "easy") for i in ex.easy)
        negs += tuple((i, it[i], "uniform") for i in ex.uniform)
        out.append(TrainingExample(ex.member_id, tables.member_tokens[ex.member_id], ex.positive, it[ex.positive], negs))
    return out


def step_batches(pairs: Sequence[tuple[str, str]], cfg: TrainConfig):
    """Yield ``(step, epoch, shard_batches)``; trailing partial global batches are dropped."""
    gbs = cfg.global_batch_size
    per_epoch = len(pairs) // gbs
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(pairs))
        for b in range(per_epoch):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return
            idx = order[b * gbs : (b + 1) * gbs]
            shards = [
                ShardBatch(s, tuple(pairs[j] for j in idx[s * cfg.per_shard_batch_size : (s + 1) * cfg.per_shard_batch_size]))
                for s in range(cfg.num_shards)
            ]
            step += 1
            yield step, epoch, shards


@dataclass
class FitResult:
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    steps: int = 0


def fit(
    model: Encoder,
    pairs: Sequence[tuple[str, str]],
    tables: TokenTables,
    imp_map: ImpressionMap,
    loss_config: LossConfig,
    sampler_config: SamplerConfig,
    train_config: TrainConfig,
    catalog: Sequence[str] | None = None,
    eval_fn: Callable[[Encoder, int], dict] | None = None,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    checkpoint_meta: Mapping | None = None,
) -> FitResult:
    """Run the epoch/step loop.

    Metrics records are buffered and appended to ``metrics_path`` whenever a
    checkpoint is written, so the log never holds steps beyond the last
    checkpoint and a resumed run continues it without duplicates.

    Args:
        stop_after: abort (as if killed) after this many steps of this call.
        checkpoint_meta: extra header fields stored in every checkpoint.
    """
    optimizer = make_optimizer(model, train_config)
    start = 0
    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {checkpoint_path}")
        saved, meta, opt_state = load_checkpoint(checkpoint_path)
        with torch.no_grad():
            for (_, p), (_, q) in zip(model.named_tensors(), saved.named_tensors()):
                p.copy_(q)
        restore_optimizer(optimizer, model, opt_state)
        start = int(meta["step"])

    result = FitResult(steps=start)
    pending: list[dict] = []

    def flush(step: int) -> None:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model, optimizer, step,
                            {"train": train_config.to_dict(), **(checkpoint_meta or {})})
        if metrics_path is not None and pending:
            with open(metrics_path, "a", encoding="utf-8") as f:
                for rec in pending:
                    f.write(json.dumps(rec, sort_keys=True) + "\n")
        pending.clear()

    done_here = 0
    for step, epoch, shards in step_batches(pairs, train_config):
        if step <= start:
            continue
        sx = assemble_step(shards, imp_map, sampler_config, step=step, catalog=catalog)
        loss = train_step(model, to_training_examples(sx, tables), loss_config, optimizer,
                          train_config.grad_clip_norm, step)
        result.losses.append(loss)
        result.steps = step
        pending.append({"step": step, "epoch": epoch, "loss": loss})
        if train_config.eval_every and step % train_config.eval_every == 0:
            metrics = eval_fn(model, step) if eval_fn is not None else {}
            rec = {"step": step, "kind": "eval", **metrics}
            result.evals.append(rec)
            pending.append(rec)
            flush(step)
        elif train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
            flush(step)
        done_here += 1
        if stop_after is not None and done_here >= stop_after:
            return result
        if step % 50 == 0:
            log.info("step %d epoch %d loss %.4f", step, epoch, loss)
    flush(result.steps)
    return result
