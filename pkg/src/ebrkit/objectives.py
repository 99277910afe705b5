"""Cosine similarity and the BCE, InfoNCE and Matryoshka training losses.

Scalar entry points (``cosine``, ``bce_loss``, ``infonce_loss``, ``mrl_loss``)
accept tensors or array-likes and return 0-d tensors so they stay
differentiable. The ``batch_*`` variants are what the trainer uses.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

MIN_NORM = 1e-12
LOSS_KINDS = ("bce", "infonce", "infonce_mrl")


@dataclass(frozen=True)
class LossConfig:
    loss_kind: str = "infonce"
    temperature: float | None = None
    mrl_dims: tuple[int, ...] = (8, 16, 32, 64)
    mrl_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        dims = tuple(sorted(int(d) for d in self.mrl_dims))
        if len(set(dims)) != len(dims) or not dims or dims[0] < 1:
            raise ValueError("mrl_dims must be distinct positive sizes")
        object.__setattr__(self, "mrl_dims", dims)
        if self.mrl_weights is None:
            object.__setattr__(self, "mrl_weights", tuple(1.0 / len(dims) for _ in dims))
        else:
            w = tuple(float(x) for x in self.mrl_weights)
            if len(w) != len(dims) or any(x <= 0 for x in w):
                raise ValueError("mrl_weights must be positive, one per mrl dim")
            object.__setattr__(self, "mrl_weights", w)

    @property
    def tau(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return 1.0 if self.loss_kind == "bce" else 0.05

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mrl_dims"] = list(self.mrl_dims)
        d["mrl_weights"] = list(self.mrl_weights)
        return d


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.is_floating_point() else x.double()
    return torch.as_tensor(x, dtype=torch.float64)


def normalize(x: torch.Tensor) -> torch.Tensor:
    """Row-wise unit normalization that refuses near-zero vectors."""
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms < MIN_NORM).any()):
        raise ValueError(f"embedding norm below {MIN_NORM}; cosine undefined")
    return x / norms


def cosine(e_m, e_i) -> torch.Tensor:
    e_m, e_i = _t(e_m), _t(e_i)
    return (normalize(e_m) * normalize(e_i)).sum(dim=-1)


def bce_loss(s, y, tau: float = 1.0) -> torch.Tensor:
    """Sigmoid BCE on ``s/tau`` written as softplus, which never takes log(0)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s, y = _t(s), _t(y)
    if bool(((y != 0) & (y != 1)).any()):
        raise ValueError("labels must be 0 or 1")
    z = s / tau
    # -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y z
    return F.softplus(z) - y * z


def infonce_loss(s_pos, s_negs, tau: float = 0.05) -> torch.Tensor:
    if tau <= 0:
        raise ValueError("tau must be positive")
    s_negs = _t(s_negs).reshape(-1)
    if s_negs.numel() == 0:
        raise ValueError("infonce_loss needs at least one negative")
    s_pos = _t(s_pos).reshape(1).to(s_negs.dtype)
    logits = torch.cat([s_pos, s_negs]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def mrl_loss(e_m, e_pos, e_negs, config: LossConfig) -> torch.Tensor:
    """Weighted sum of InfoNCE losses on each prefix, each prefix re-normalized."""
    e_m, e_pos, e_negs = _t(e_m), _t(e_pos), _t(e_negs)
    if e_negs.ndim == 1:
        e_negs = e_negs[None, :]
    width = min(e_m.shape[-1], e_pos.shape[-1], e_negs.shape[-1])
    if config.mrl_dims[-1] > width:
        raise ValueError(f"prefix {config.mrl_dims[-1]} longer than embedding dim {width}")
    total = e_m.new_zeros(())
    for k, lam in zip(config.mrl_dims, config.mrl_weights):
        s_pos = cosine(e_m[:k], e_pos[:k])
        s_negs = cosine(e_m[None, :k], e_negs[:, :k])
        total = total + lam * infonce_loss(s_pos, s_negs, config.tau)
    return total


# -- batched forms -------------------------------------------------------


def similarity_matrix(members: torch.Tensor, items: torch.Tensor, dim: int | None = None) -> torch.Tensor:
    """Cosine of every member row against every item row, optionally on a prefix."""
    if dim is not None:
        members, items = members[:, :dim], items[:, :dim]
    return normalize(members) @ normalize(items).T


def batch_infonce(sims: torch.Tensor, pos_idx: torch.Tensor, neg_mask: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean InfoNCE over anchors.

    Args:
        sims: ``(B, C)`` similarities of each anchor against all step items.
        pos_idx: ``(B,)`` column of each anchor's positive.
        neg_mask: ``(B, C)`` bool, True where the column is one of the
            anchor's negatives.
    """
    logits = sims / tau
    rows = torch.arange(sims.shape[0])
    keep = neg_mask.clone()
    keep[rows, pos_idx] = True
    masked = logits.masked_fill(~keep, float("-inf"))
    return (torch.logsumexp(masked, dim=1) - logits[rows, pos_idx]).mean()


def batch_bce(sims: torch.Tensor, pos_idx: torch.Tensor, neg_mask: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean BCE over every (anchor, positive) and (anchor, negative) pair."""
    rows = torch.arange(sims.shape[0])
    labels = torch.zeros_like(sims)
    labels[rows, pos_idx] = 1.0
    used = neg_mask.clone()
    used[rows, pos_idx] = True
    z = sims / tau
    per_pair = F.softplus(z) - labels * z
    return per_pair[used].mean()


def batch_loss(
    member_emb: torch.Tensor,
    item_emb: torch.Tensor,
    pos_idx: torch.Tensor,
    neg_mask: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    if config.loss_kind == "infonce_mrl":
        total = member_emb.new_zeros(())
        for k, lam in zip(config.mrl_dims, config.mrl_weights):
            if k > member_emb.shape[1]:
                raise ValueError(f"prefix {k} longer than embedding dim {member_emb.shape[1]}")
            sims = similarity_matrix(member_emb, item_emb, k)
            total = total + lam * batch_infonce(sims, pos_idx, neg_mask, config.tau)
        return total
    sims = similarity_matrix(member_emb, item_emb)
    if config.loss_kind == "bce":
        return batch_bce(sims, pos_idx, neg_mask, config.tau)
    return batch_infonce(sims, pos_idx, neg_mask, config.tau)
