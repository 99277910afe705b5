"""Member-level Recall@k against a ranking oracle, and the popularity diagnostic."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np


class Scorer(Protocol):
    def score(self, member_id: str, item_ids: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True)
class EvalConfig:
    sample_size: int | None = None
    n: int = 10
    k: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise ValueError("need 1 <= k <= n")


def top_by_score(item_ids: Sequence[str], scores: np.ndarray, count: int) -> list[str]:
    """Highest scores first, ties by ascending item id."""
    order = sorted(range(len(item_ids)), key=lambda j: (-float(scores[j]), item_ids[j]))
    return [item_ids[j] for j in order[:count]]


def recall_from_sets(set_1: Sequence[str], set_2: Sequence[str]) -> float:
    s1 = set(set_1)
    if not s1:
        raise ValueError("Set_1 is empty")
    return len(s1 & set(set_2)) / len(s1)


@dataclass
class RecallReport:
    n: int
    k: int
    mean: float
    per_member: dict[str, float]
    skipped: list[str] = field(default_factory=list)

    @property
    def num_members(self) -> int:
        return len(self.per_member)


def recall_at_k(
    pools: Mapping[str, Sequence[str]],
    oracle: Scorer,
    retriever: Scorer,
    n: int,
    k: int,
    rerank_top_n: bool = False,
) -> RecallReport:
    """Average over members of ``|oracle top-n ∩ retriever top-k| / |oracle top-n|``.

    By default both rankings run over the member's full pool. With
    ``rerank_top_n`` the retriever only re-orders the oracle's top-n, which
    makes every score equal ``min(k, n) / n``; it is kept for completeness.
    Members with an empty pool are skipped and listed in the report.
    """
    if not 1 <= k <= n:
        raise ValueError("need 1 <= k <= n")
    per_member: dict[str, float] = {}
    skipped: list[str] = []
    for member in sorted(pools):
        pool = sorted(set(pools[member]))
        if not pool:
            skipped.append(member)
            continue
        set_1 = top_by_score(pool, oracle.score(member, pool), n)
        cand = set_1 if rerank_top_n else pool
        set_2 = top_by_score(cand, retriever.score(member, cand), k)
        per_member[member] = recall_from_sets(set_1, set_2)
    mean = float(np.mean(list(per_member.values()))) if per_member else float("nan")
    return RecallReport(n, k, mean, per_member, skipped)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 3:
        raise ValueError("need at least 3 paired values")
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise ValueError("zero variance; correlation undefined")
    return float(np.corrcoef(x, y)[0, 1])


def popularity_correlation(
    pairs: Sequence[tuple[str, str]],
    retriever: Scorer,
    popularity: Mapping[str, float] | Callable[[str], float],
) -> float:
    """Pearson r between each pair's item popularity and its retrieval score."""
    pop = popularity if callable(popularity) else popularity.__getitem__
    by_member: dict[str, list[str]] = {}
    for m, i in pairs:
        by_member.setdefault(m, []).append(i)
    scores, pops = [], []
    for m in sorted(by_member):
        items = by_member[m]
        scores.extend(np.asarray(retriever.score(m, items), dtype=np.float64).tolist())
        pops.extend(pop(i) for i in items)
    return pearson(pops, scores)


# -- retrievers ------------------------------------------------------------


class EmbeddingRetriever:
    """Cosine scorer over precomputed embeddings, optionally on a prefix."""

    def __init__(self, member_emb: Mapping[str, np.ndarray], item_emb: Mapping[str, np.ndarray], dim: int | None = None):
        self.member_emb = member_emb
        self.item_emb = item_emb
        self.dim = dim

    def score(self, member_id: str, item_ids: Sequence[str]) -> np.ndarray:
        q = np.asarray(self.member_emb[member_id], dtype=np.float64)[: self.dim]
        mat = np.stack([np.asarray(self.item_emb[i], dtype=np.float64)[: self.dim] for i in item_ids])
        qn = np.linalg.norm(q)
        mn = np.linalg.norm(mat, axis=1)
        if qn < 1e-12 or (mn < 1e-12).any():
            raise ValueError("embedding norm below 1e-12; cosine undefined")
        return (mat @ q) / (mn * qn)


class RandomRetriever:
    """Scores drawn from a Gaussian embedding per id; the chance baseline."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _vec(self, key: str) -> np.ndarray:
        v = self._cache.get(key)
        if v is None:
            h = int.from_bytes(key.encode(), "little") % (2**63)
            v = np.random.default_rng([self.seed, h]).standard_normal(self.dim)
            self._cache[key] = v
        return v

    def score(self, member_id: str, item_ids: Sequence[str]) -> np.ndarray:
        q = self._vec("m:" + member_id)
        mat = np.stack([self._vec("i:" + i) for i in item_ids])
        return (mat @ q) / (np.linalg.norm(mat, axis=1) * np.linalg.norm(q))


# -- export ----------------------------------------------------------------

SUMMARY_COLUMNS = ("dim", "n", "k", "members", "skipped", "recall_mean", "recall_std", "popularity_corr")


def write_summary_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in SUMMARY_COLUMNS})


def summary_row(report: RecallReport, dim: int, popularity_corr: float | None = None) -> dict:
    vals = np.array(list(report.per_member.values()))
    return {
        "dim": dim,
        "n": report.n,
        "k": report.k,
        "members": report.num_members,
        "skipped": len(report.skipped),
        "recall_mean": f"{report.mean:.6f}",
        "recall_std": f"{vals.std():.6f}" if vals.size else "",
        "popularity_corr": "" if popularity_corr is None else f"{popularity_corr:.6f}",
    }


def write_per_member_csv(reports: Mapping[int, RecallReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["dim", "member_id", "recall"])
        for dim in sorted(reports):
            for m, r in sorted(reports[dim].per_member.items()):
                w.writerow([dim, m, f"{r:.6f}"])
