"""Exact cosine kNN over item embeddings with attribute pre-filtering.

Embeddings are unit-normalized at ingest, so a query costs one dot product
per eligible row. Filters are evaluated as boolean masks before scoring,
which keeps top-k exact under filtering.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .tensorfile import read_tensors, write_tensors

MIN_NORM = 1e-12


class StaleVersionError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ItemAttributes:
    author_id: str
    languages: frozenset[str]
    trust_approved: bool = True
    created_at: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "languages", frozenset(self.languages))
        if not self.languages:
            raise ValueError("item languages must be non-empty")


@dataclass(frozen=True)
class IndexEntry:
    item_id: str
    embedding: np.ndarray
    attributes: ItemAttributes
    version: int | None = None


@dataclass(frozen=True)
class QueryFilters:
    """``viewer_languages=None`` disables the language predicate."""

    viewer_languages: frozenset[str] | None = None
    blocked_authors: frozenset[str] = frozenset()
    seen_items: frozenset[str] = frozenset()
    require_trust: bool = True

    def merged(self, other: "QueryFilters | None") -> "QueryFilters":
        if other is None:
            return self
        if self.viewer_languages is None:
            langs = other.viewer_languages
        elif other.viewer_languages is None:
            langs = self.viewer_languages
        else:
            langs = self.viewer_languages & other.viewer_languages
        return QueryFilters(
            viewer_languages=langs,
            blocked_authors=frozenset(self.blocked_authors) | frozenset(other.blocked_authors),
            seen_items=frozenset(self.seen_items) | frozenset(other.seen_items),
            require_trust=self.require_trust or other.require_trust,
        )


def passes(attrs: ItemAttributes, item_id: str, filters: QueryFilters) -> bool:
    """Scalar predicate, the reference for the vectorized mask."""
    if filters.require_trust and not attrs.trust_approved:
        return False
    if filters.viewer_languages is not None and not (attrs.languages & filters.viewer_languages):
        return False
    return attrs.author_id not in filters.blocked_authors and item_id not in filters.seen_items


class FlatIndex:
    """Exact kNN index; one writer at a time, queries see a consistent state."""

    def __init__(self, dim: int, capacity: int = 1024):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self._lock = threading.RLock()
        cap = max(1, capacity)
        self._emb = np.zeros((cap, dim))
        self._alive = np.zeros(cap, dtype=bool)
        self._trust = np.zeros(cap, dtype=bool)
        self._lang = np.zeros(cap, dtype=np.int64)
        self._author = np.full(cap, -1, dtype=np.int64)
        self._created = np.zeros(cap)
        self._ids: list[str | None] = [None] * cap
        self._attrs: list[ItemAttributes | None] = [None] * cap
        self._row: dict[str, int] = {}
        self._free: list[int] = []
        self._high = 0
        self._versions: dict[str, int] = {}  # survives removal so versions stay monotone
        self._lang_bits: dict[str, int] = {}
        self._author_codes: dict[str, int] = {}
        self.latencies_ms: list[float] = []

    # -- writes --------------------------------------------------------------

    def _grow(self) -> None:
        cap = self._emb.shape[0] * 2
        self._emb = np.resize(self._emb, (cap, self.dim))
        for name in ("_alive", "_trust", "_lang", "_author", "_created"):
            old = getattr(self, name)
            new = np.full(cap, -1 if name == "_author" else 0, dtype=old.dtype)
            new[: old.size] = old
            setattr(self, name, new)
        self._ids.extend([None] * (cap - len(self._ids)))
        self._attrs.extend([None] * (cap - len(self._attrs)))

    def _lang_mask(self, langs: Iterable[str]) -> int:
        mask = 0
        for lang in langs:
            bit = self._lang_bits.get(lang)
            if bit is None:
                if len(self._lang_bits) >= 62:
                    raise ValueError("too many distinct languages for the bitmask")
                bit = self._lang_bits[lang] = len(self._lang_bits)
            mask |= 1 << bit
        return mask

    def upsert(self, entry: IndexEntry) -> int:
        """Insert or replace; returns the stored version.

        A missing version means "next one". Versions at or below the current
        one (including versions of removed items) raise StaleVersionError.
        """
        emb = np.asarray(entry.embedding, dtype=np.float64)
        if emb.shape != (self.dim,):
            raise DimensionMismatchError(f"embedding shape {emb.shape} != ({self.dim},)")
        norm = float(np.linalg.norm(emb))
        if not np.isfinite(norm) or norm < MIN_NORM:
            raise ValueError(f"item {entry.item_id}: embedding norm {norm} unusable")
        with self._lock:
            current = self._versions.get(entry.item_id, 0)
            version = current + 1 if entry.version is None else int(entry.version)
            if version <= current:
                raise StaleVersionError(f"item {entry.item_id}: version {version} <= current {current}")
            row = self._row.get(entry.item_id)
            if row is None:
                if self._free:
                    row = self._free.pop()
                else:
                    if self._high == self._emb.shape[0]:
                        self._grow()
                    row = self._high
                    self._high += 1
                self._row[entry.item_id] = row
            a = entry.attributes
            self._emb[row] = emb / norm
            self._trust[row] = a.trust_approved
            self._lang[row] = self._lang_mask(a.languages)
            self._author[row] = self._author_codes.setdefault(a.author_id, len(self._author_codes))
            self._created[row] = a.created_at
            self._ids[row] = entry.item_id
            self._attrs[row] = a
            self._alive[row] = True
            self._versions[entry.item_id] = version
            return version

    def remove(self, item_id: str) -> bool:
        """Idempotent; returns whether anything was removed."""
        with self._lock:
            row = self._row.pop(item_id, None)
            if row is None:
                return False
            self._alive[row] = False
            self._ids[row] = None
            self._attrs[row] = None
            self._free.append(row)
            return True

    # -- reads ---------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._row)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._row

    def version(self, item_id: str) -> int | None:
        return self._versions.get(item_id) if item_id in self._row else None

    def get(self, item_id: str) -> IndexEntry | None:
        with self._lock:
            row = self._row.get(item_id)
            if row is None:
                return None
            return IndexEntry(item_id, self._emb[row].copy(), self._attrs[row], self._versions[item_id])

    def entries(self) -> Iterator[IndexEntry]:
        with self._lock:
            snapshot = [self.get(i) for i in sorted(self._row)]
        return iter(snapshot)

    def _mask(self, f: QueryFilters) -> np.ndarray:
        n = self._high
        mask = self._alive[:n].copy()
        if f.require_trust:
            mask &= self._trust[:n]
        if f.viewer_languages is not None:
            bits = 0
            for lang in f.viewer_languages:
                if lang in self._lang_bits:
                    bits |= 1 << self._lang_bits[lang]
            mask &= (self._lang[:n] & bits) != 0
        if f.blocked_authors:
            codes = [self._author_codes[a] for a in f.blocked_authors if a in self._author_codes]
            if codes:
                mask &= ~np.isin(self._author[:n], codes)
        for item in f.seen_items:
            row = self._row.get(item)
            if row is not None:
                mask[row] = False
        return mask

    def knn(self, query: Sequence[float], k: int, filters: QueryFilters | None = None) -> list[tuple[str, float]]:
        """Exact top-k by cosine among eligible items; ties by ascending item id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatchError(f"query shape {q.shape} != ({self.dim},)")
        qn = float(np.linalg.norm(q))
        if qn < MIN_NORM:
            raise ValueError("query norm below 1e-12")
        t0 = time.perf_counter()
        with self._lock:
            rows = np.flatnonzero(self._mask(filters or QueryFilters()))
            scores = self._emb[rows] @ (q / qn)
            if rows.size > k:
                kth = np.partition(scores, rows.size - k)[rows.size - k]
                keep = scores >= kth
                rows, scores = rows[keep], scores[keep]
            ids = [self._ids[r] for r in rows]
        order = sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))[:k]
        self.latencies_ms.append((time.perf_counter() - t0) * 1e3)
        return [(ids[j], float(scores[j])) for j in order]

    def latency_summary(self) -> dict[str, float]:
        if not self.latencies_ms:
            return {"count": 0}
        lat = np.asarray(self.latencies_ms)
        return {
            "count": int(lat.size),
            "p50_ms": float(np.percentile(lat, 50)),
            "p99_ms": float(np.percentile(lat, 99)),
            "max_ms": float(lat.max()),
        }

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        with self._lock:
            ids = sorted(self._row)
            rows = [self._row[i] for i in ids]
            attrs = [self._attrs[r] for r in rows]
            write_tensors(
                path,
                {
                    "embeddings": self._emb[rows] if rows else np.zeros((0, self.dim)),
                    "versions": np.array([self._versions[i] for i in ids], dtype=np.int64),
                    "trust": np.array([a.trust_approved for a in attrs], dtype=bool),
                    "created_at": np.array([a.created_at for a in attrs], dtype=np.float64),
                },
                meta={
                    "dim": self.dim,
                    "item_ids": ids,
                    "authors": [a.author_id for a in attrs],
                    "languages": [sorted(a.languages) for a in attrs],
                    "removed_versions": {i: v for i, v in sorted(self._versions.items()) if i not in self._row},
                },
            )

    @classmethod
    def load(cls, path: str | Path) -> "FlatIndex":
        t, meta = read_tensors(path)
        index = cls(meta["dim"], capacity=max(1, len(meta["item_ids"])))
        for j, item_id in enumerate(meta["item_ids"]):
            attrs = ItemAttributes(meta["authors"][j], frozenset(meta["languages"][j]),
                                   bool(t["trust"][j]), float(t["created_at"][j]))
            index.upsert(IndexEntry(item_id, t["embeddings"][j], attrs, int(t["versions"][j])))
            # stored rows are already unit norm; renormalizing would perturb the last bit
            index._emb[index._row[item_id]] = t["embeddings"][j]
        index._versions.update({k: int(v) for k, v in meta["removed_versions"].items()})
        return index
