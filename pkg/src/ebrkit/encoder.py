"""Shared text encoder: token hidden states, pooling and projection.

Two architectures share one parameter layout convention:

* ``bag_mlp``: each row is a residual MLP applied to token embedding plus a
  sinusoidal position code. Rows never interact, which makes it cheap.
* ``causal_attention``: pre-norm causal self-attention blocks.

The same module instance encodes both member and item prompts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._alloc import limit_heap_growth

limit_heap_growth()

ARCHS = ("bag_mlp", "causal_attention")
POOLINGS = ("mean", "last_n")
PLACEMENTS = ("pre_pool", "post_pool")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 1
    num_heads: int = 4
    max_context: int = 512
    arch: str = "bag_mlp"
    seed: int = 0
    mlp_ratio: int = 2
    pooling: str = "mean"
    last_n: int | None = None
    projection: str | None = None
    projection_dim: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if self.vocab_size < 1 or self.hidden_dim < 1 or self.max_context < 1:
            raise ValueError("vocab_size, hidden_dim and max_context must be positive")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.arch == "causal_attention" and self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.pooling == "last_n" and (self.last_n is None or self.last_n < 1):
            raise ValueError("last_n pooling needs last_n >= 1")
        if self.projection is not None:
            if self.projection not in PLACEMENTS:
                raise ValueError(f"projection must be one of {PLACEMENTS}")
            if self.projection_dim is None or not 1 <= self.projection_dim <= self.hidden_dim:
                raise ValueError("projection_dim must be in [1, hidden_dim]")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")

    @property
    def output_dim(self) -> int:
        return self.projection_dim if self.projection else self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine codes scaled by ``1/sqrt(dim)`` to match embedding scale."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)[:, : dim // 2]
    return pe / math.sqrt(dim)


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """``(name, shape, init)`` in canonical order; init is normal/zeros/ones."""
    d, h = cfg.hidden_dim, cfg.mlp_ratio * cfg.hidden_dim
    shapes = [("tok_emb", (cfg.vocab_size, d), "normal")]
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        if cfg.arch == "causal_attention":
            shapes += [
                (p + "ln1_g", (d,), "ones"),
                (p + "ln1_b", (d,), "zeros"),
                (p + "w_qkv", (d, 3 * d), "normal"),
                (p + "b_qkv", (3 * d,), "zeros"),
                (p + "w_out", (d, d), "normal"),
                (p + "b_out", (d,), "zeros"),
                (p + "ln2_g", (d,), "ones"),
                (p + "ln2_b", (d,), "zeros"),
            ]
        shapes += [
            (p + "w1", (d, h), "normal"),
            (p + "b1", (h,), "zeros"),
            (p + "w2", (h, d), "normal"),
            (p + "b2", (d,), "zeros"),
        ]
    if cfg.arch == "causal_attention":
        shapes += [("lnf_g", (d,), "ones"), ("lnf_b", (d,), "zeros")]
    if cfg.projection:
        shapes.append(("proj", (d, cfg.projection_dim), "normal"))
    return shapes


class Encoder(nn.Module):
    """Parameter set plus forward pass. Build with :func:`init_params`."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, torch.Tensor]):
        super().__init__()
        self.config = config
        self._names = [n for n, _, _ in _param_shapes(config)]
        expected = {n: s for n, s, _ in _param_shapes(config)}
        if set(tensors) != set(expected):
            raise ValueError(f"parameter names mismatch: {sorted(set(tensors) ^ set(expected))}")
        self.params = nn.ParameterDict()
        for name in self._names:
            t = tensors[name]
            if tuple(t.shape) != expected[name]:
                raise ValueError(f"{name}: shape {tuple(t.shape)} != {expected[name]}")
            self.params[name.replace(".", "_")] = nn.Parameter(t.to(_DTYPES[config.dtype]).clone())
        self.register_buffer(
            "pos_table",
            torch.tensor(sinusoidal_positions(config.max_context, config.hidden_dim), dtype=_DTYPES[config.dtype]),
            persistent=False,
        )

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.config.dtype]

    def p(self, name: str) -> torch.Tensor:
        return self.params[name.replace(".", "_")]

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        """Parameters in canonical order under their dotted names."""
        return [(n, self.p(n)) for n in self._names]

    # -- forward pieces -------------------------------------------------

    def _mlp(self, x: torch.Tensor, p: str) -> torch.Tensor:
        hid = F.gelu(x @ self.p(p + "w1") + self.p(p + "b1"))
        return hid @ self.p(p + "w2") + self.p(p + "b2")

    def _attn(self, x: torch.Tensor, p: str) -> torch.Tensor:
        # x: (B, L, d)
        b, length, d = x.shape
        nh = self.config.num_heads
        qkv = x @ self.p(p + "w_qkv") + self.p(p + "b_qkv")
        q, k, v = qkv.split(d, dim=-1)
        q = q.view(b, length, nh, d // nh).transpose(1, 2)
        k = k.view(b, length, nh, d // nh).transpose(1, 2)
        v = v.view(b, length, nh, d // nh).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // nh)
        causal = torch.ones(length, length, dtype=torch.bool, device=x.device).tril()
        att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, length, d)
        return out @ self.p(p + "w_out") + self.p(p + "b_out")

    def _hidden_flat(self, flat_ids: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        x = self.p("tok_emb")[flat_ids] + self.pos_table[positions]
        for i in range(self.config.num_layers):
            x = x + self._mlp(x, f"layers.{i}.")
        return x

    def _hidden_padded(self, padded: torch.Tensor) -> torch.Tensor:
        d = self.config.hidden_dim
        length = padded.shape[1]
        x = self.p("tok_emb")[padded] + self.pos_table[:length]
        for i in range(self.config.num_layers):
            p = f"layers.{i}."
            x = x + self._attn(F.layer_norm(x, (d,), self.p(p + "ln1_g"), self.p(p + "ln1_b")), p)
            x = x + self._mlp(F.layer_norm(x, (d,), self.p(p + "ln2_g"), self.p(p + "ln2_b")), p)
        return F.layer_norm(x, (d,), self.p("lnf_g"), self.p("lnf_b"))

    def hidden_states(self, seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, np.ndarray]:
        """Hidden states of every token of every sequence, concatenated.

        Returns:
            ``(H_flat, lengths)`` where ``H_flat`` has one row per token.
        """
        lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
        self._validate_lengths(lengths)
        flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=int(lengths.sum()))
        if flat.min() < 0 or flat.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        if self.config.arch == "bag_mlp":
            positions = np.arange(flat.size) - np.repeat(np.cumsum(lengths) - lengths, lengths)
            return self._hidden_flat(torch.from_numpy(flat), torch.from_numpy(positions)), lengths
        padded = np.zeros((len(seqs), int(lengths.max())), dtype=np.int64)
        valid = np.arange(padded.shape[1])[None, :] < lengths[:, None]
        padded[valid] = flat
        hid = self._hidden_padded(torch.from_numpy(padded))
        return hid[torch.from_numpy(valid)], lengths

    def _validate_lengths(self, lengths: np.ndarray) -> None:
        if lengths.size == 0:
            raise ValueError("no sequences to encode")
        if lengths.min() < 1:
            raise ValueError("cannot encode an empty token sequence")
        if lengths.max() > self.config.max_context:
            raise ValueError(f"sequence length {lengths.max()} exceeds max_context {self.config.max_context}")

    def forward(self, seqs: Sequence[Sequence[int]]) -> torch.Tensor:
        """Pooled (and projected, if configured) embeddings, one row per sequence."""
        cfg = self.config
        hid, lengths = self.hidden_states(seqs)
        if cfg.projection == "pre_pool":
            hid = project(hid, self.p("proj"), "pre_pool")
        n = None if cfg.pooling == "mean" else cfg.last_n
        emb = _segment_pool(hid, lengths, n)
        if cfg.projection == "post_pool":
            emb = project(emb, self.p("proj"), "post_pool")
        return emb


def _segment_pool(hid: torch.Tensor, lengths: np.ndarray, last_n: int | None) -> torch.Tensor:
    starts = np.cumsum(lengths) - lengths
    seg = np.repeat(np.arange(lengths.size), lengths)
    offset = np.arange(hid.shape[0]) - np.repeat(starts, lengths)
    if last_n is None:
        counts = lengths
        keep = np.ones(hid.shape[0], dtype=bool)
    else:
        counts = np.minimum(lengths, last_n)
        keep = offset >= np.repeat(lengths - counts, lengths)
    w = torch.from_numpy(keep / np.repeat(counts, lengths)).to(hid.dtype)
    out = hid.new_zeros(lengths.size, hid.shape[1])
    return out.index_add(0, torch.from_numpy(seg), hid * w[:, None])


def init_params(config: EncoderConfig) -> Encoder:
    """Deterministic initialization from ``config.seed``.

    Matrices are drawn from N(0, 1/fan_in), i.e. scale ``1/sqrt(fan_in)``;
    biases and norm offsets start at zero, norm gains at one.
    """
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "normal":
            fan_in = shape[1] if name == "tok_emb" else shape[0]
            arr = rng.standard_normal(shape) / math.sqrt(fan_in)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = torch.from_numpy(arr)
    return Encoder(config, tensors)


def encode(model: Encoder, token_ids: Sequence[int]) -> torch.Tensor:
    """Hidden states ``H`` of shape ``(L, d)`` for one sequence."""
    hid, _ = model.hidden_states([list(token_ids)])
    return hid


def mean_pool(hidden: torch.Tensor) -> torch.Tensor:
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise ValueError("mean_pool needs a non-empty (L, d) matrix")
    return hidden.mean(dim=0)


def last_n_pool(hidden: torch.Tensor, n: int) -> torch.Tensor:
    """Mean of the last ``min(n, L)`` rows."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise ValueError("last_n_pool needs a non-empty (L, d) matrix")
    return hidden[-n:].mean(dim=0)


def project(x: torch.Tensor, matrix: torch.Tensor, placement: str) -> torch.Tensor:
    """Apply a ``d -> d'`` projection to hidden rows (pre_pool) or a pooled vector (post_pool)."""
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}")
    if matrix.ndim != 2 or matrix.shape[1] > matrix.shape[0]:
        raise ValueError("projection matrix must have shape (d, d') with d' <= d")
    if x.shape[-1] != matrix.shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} does not match projection input {matrix.shape[0]}")
    if placement == "pre_pool" and x.ndim != 2:
        raise ValueError("pre_pool projection expects a (L, d) hidden-state matrix")
    return x @ matrix


def embed(model: Encoder, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    """Inference-only embeddings as a float64 array."""
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            out.append(model(seqs[i : i + batch_size]).double().numpy())
    if not out:
        return np.zeros((0, model.config.output_dim))
    return np.concatenate(out, axis=0)


def backward(model: Encoder, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every parameter.

    Gradients accumulate into the parameters' ``.grad`` (cleared first), so a
    loss built from both towers collects both contributions on the shared
    weights.
    """
    if not bool(torch.isfinite(loss).all()):
        raise FloatingPointError(f"non-finite loss {loss.detach().tolist()} before backward")
    model.zero_grad(set_to_none=False)
    for _, p in model.named_tensors():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    if loss.requires_grad:
        loss.backward()
    return {name: p.grad.detach().clone() for name, p in model.named_tensors()}
