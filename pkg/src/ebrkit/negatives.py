"""Mixed negative sampling: global in-batch easy negatives plus mined hard negatives."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ALL_IN_BATCH = "all_in_batch"


@dataclass(frozen=True)
class EngagementRow:
    member_id: str
    item_id: str
    impressed: bool
    engaged: bool
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "member_id": self.member_id,
            "item_id": self.item_id,
            "impressed": self.impressed,
            "engaged": self.engaged,
            "timestamp": self.timestamp,
        }


def parse_engagement_row(raw: Mapping, lineno: int) -> EngagementRow:
    try:
        row = EngagementRow(
            member_id=str(raw["member_id"]),
            item_id=str(raw["item_id"]),
            impressed=raw["impressed"],
            engaged=raw["engaged"],
            timestamp=float(raw["timestamp"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"engagement log line {lineno}: malformed row ({exc!r})") from None
    if not isinstance(row.impressed, bool) or not isinstance(row.engaged, bool):
        raise ValueError(f"engagement log line {lineno}: impressed/engaged must be booleans")
    return row


def read_engagement_log(path: str | Path) -> list[EngagementRow]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError:
                raise ValueError(f"{path}:{lineno}: invalid JSON") from None
            rows.append(parse_engagement_row(raw, lineno))
    return rows


@dataclass(frozen=True)
class ImpressionMap:
    """Per-member hard-negative candidates plus every engaged item (known positives)."""

    hard: Mapping[str, tuple[str, ...]]
    positives: Mapping[str, frozenset[str]]

    def get(self, member_id: str) -> tuple[str, ...]:
        return self.hard.get(member_id, ())

    def known_positives(self, member_id: str) -> frozenset[str]:
        return self.positives.get(member_id, frozenset())

    def __contains__(self, member_id: str) -> bool:
        return member_id in self.hard

    def __len__(self) -> int:
        return len(self.hard)


def build_impression_map(engagement_log: Iterable[EngagementRow | Mapping]) -> ImpressionMap:
    """Items impressed with no engagement, per member, ordered by first impression time.

    An item the member engaged with at any time is never a hard negative.
    """
    first_seen: dict[str, dict[str, float]] = {}
    engaged: dict[str, set[str]] = {}
    for lineno, row in enumerate(engagement_log, 1):
        if not isinstance(row, EngagementRow):
            row = parse_engagement_row(row, lineno)
        if row.engaged:
            engaged.setdefault(row.member_id, set()).add(row.item_id)
        if row.impressed:
            seen = first_seen.setdefault(row.member_id, {})
            if row.item_id not in seen or row.timestamp < seen[row.item_id]:
                seen[row.item_id] = row.timestamp
    hard = {}
    for member, seen in first_seen.items():
        pos = engaged.get(member, set())
        items = sorted((t, i) for i, t in seen.items() if i not in pos)
        if items:
            hard[member] = tuple(i for _, i in items)
    return ImpressionMap(hard, {m: frozenset(s) for m, s in engaged.items()})


@dataclass(frozen=True)
class SamplerConfig:
    num_hard: int = 2
    num_easy: int | str = ALL_IN_BATCH
    num_uniform: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_hard < 0 or self.num_uniform < 0:
            raise ValueError("num_hard and num_uniform must be >= 0")
        if self.num_easy != ALL_IN_BATCH and (not isinstance(self.num_easy, int) or self.num_easy < 0):
            raise ValueError(f"num_easy must be a non-negative int or {ALL_IN_BATCH!r}")
        if self.num_hard == 0 and self.num_easy == 0 and self.num_uniform == 0:
            raise ValueError("sampler would produce no negatives")


@dataclass(frozen=True)
class ShardBatch:
    shard_id: int
    pairs: tuple[tuple[str, str], ...]


def global_batch(shard_batches: Sequence[ShardBatch]) -> list[tuple[str, str]]:
    """Concatenate shard batches in ascending shard id."""
    out: list[tuple[str, str]] = []
    for sb in sorted(shard_batches, key=lambda s: s.shard_id):
        out.extend(sb.pairs)
    return out


@dataclass(frozen=True)
class StepExample:
    member_id: str
    positive: str
    hard: tuple[str, ...]
    easy: tuple[str, ...]
    uniform: tuple[str, ...] = ()
    shortfall: int = 0

    @property
    def negatives(self) -> tuple[str, ...]:
        return self.hard + self.easy + self.uniform


def _eligible_easy(batch, member_positive, excluded) -> list[str]:
    out, seen = [], set()
    for _, item in batch:
        if item == member_positive or item in excluded or item in seen:
            continue
        seen.add(item)
        out.append(item)
    return out


def _choose(pool: Sequence[str], n: int, rng: np.random.Generator) -> tuple[str, ...]:
    if n >= len(pool):
        idx = rng.permutation(len(pool))
    else:
        idx = rng.choice(len(pool), size=n, replace=False)
    return tuple(pool[i] for i in idx)


def sample_easy(
    batch: Sequence[tuple[str, str]],
    member_id: str,
    member_positive: str,
    num_easy: int | str,
    rng: np.random.Generator,
    known_positives: Iterable[str] = (),
    exclude: Iterable[str] = (),
) -> tuple[str, ...]:
    """Other examples' positives, excluding anything the member is known to like.

    ``all_in_batch`` returns every eligible item in batch order; an integer
    draws that many uniformly without replacement (all of them if fewer).
    """
    eligible = _eligible_easy(batch, member_positive, set(known_positives) | set(exclude))
    if not eligible:
        raise ValueError(f"no eligible in-batch negatives for member {member_id} (batch too small)")
    if num_easy == ALL_IN_BATCH:
        return tuple(eligible)
    return _choose(eligible, int(num_easy), rng)


def sample_hard(
    imp_map: ImpressionMap,
    member_id: str,
    num_hard: int,
    rng: np.random.Generator,
    exclude: Iterable[str] = (),
) -> tuple[tuple[str, ...], int]:
    """Uniform draw without replacement from the member's impressions.

    Returns:
        ``(items, shortfall)``; shortfall counts the negatives that could not
        be supplied.
    """
    if num_hard < 0:
        raise ValueError("num_hard must be >= 0")
    if num_hard == 0:
        return (), 0
    excluded = set(exclude)
    pool = [i for i in imp_map.get(member_id) if i not in excluded]
    picked = _choose(pool, num_hard, rng)
    return picked, num_hard - len(picked)


def _sample_uniform(catalog, n, excluded, rng) -> tuple[str, ...]:
    """Distinct catalog items by rejection sampling; ``excluded`` must be a subset of ``catalog``."""
    if n <= 0 or not catalog:
        return ()
    out: list[str] = []
    taken = set(excluded)
    available = len(catalog) - len(taken)
    n = min(n, max(0, available))
    while len(out) < n:
        cand = catalog[int(rng.integers(len(catalog)))]
        if cand not in taken:
            taken.add(cand)
            out.append(cand)
    return tuple(out)


def assemble_step(
    shard_batches: Sequence[ShardBatch],
    imp_map: ImpressionMap,
    config: SamplerConfig,
    step: int = 0,
    catalog: Sequence[str] | None = None,
) -> list[StepExample]:
    """Negatives for every anchor of one global batch.

    Each anchor gets K hard negatives and J easy negatives. When a catalog is
    given, one pool of ``num_uniform`` corpus items is drawn per step and
    shared by all anchors (minus each anchor's own positives). A hard-negative
    shortfall is topped up with extra easy negatives first, then with extra
    per-anchor corpus draws. The result depends only on the global batch
    contents, seed and step.
    """
    if not shard_batches or not any(sb.pairs for sb in shard_batches):
        raise ValueError("empty step: no shard batch has examples")
    batch = global_batch(shard_batches)
    catalog_list = list(catalog) if catalog is not None else []
    catalog_set = frozenset(catalog_list)
    shared = _sample_uniform(catalog_list, config.num_uniform, (), np.random.default_rng([config.seed, step]))
    out = []
    for a, (member, positive) in enumerate(batch):
        rng = np.random.default_rng([config.seed, step, a])
        known = imp_map.known_positives(member) | {positive}
        hard, short = sample_hard(imp_map, member, config.num_hard, rng, exclude=known)
        eligible = _eligible_easy(batch, positive, known | set(hard))
        if config.num_easy == ALL_IN_BATCH:
            easy = tuple(eligible)
            top_up = short
        else:
            want = int(config.num_easy) + short
            easy = _choose(eligible, want, rng)
            top_up = want - len(easy)
        taken = known | set(hard) | set(easy)
        uniform = tuple(i for i in shared if i not in taken)
        if catalog_list and top_up:
            extra = _sample_uniform(catalog_list, top_up, (taken | set(shared)) & catalog_set, rng)
            uniform += extra
            top_up -= len(extra)
        if not hard and not easy and not uniform:
            raise ValueError(f"anchor {a} (member {member}) has no negatives available")
        out.append(StepExample(member, positive, hard, easy, uniform, shortfall=top_up))
    return out
