"""Discrete-event simulation of the nearline embedding-refresh pipeline.

Events enter an activity log via :meth:`NearlineSim.ingest`. Advancing the
simulated clock applies each event's feature effects at its own timestamp and
drains each event class's pending queue at multiples of that class's window.
A drain re-renders prompts and re-embeds every distinct subject it touches
exactly once, then publishes items to the :class:`FlatIndex` and members to
the :class:`MemberEmbeddingStore`. All times are simulated seconds.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .encoder import Encoder, embed
from .index import FlatIndex, IndexEntry, ItemAttributes, QueryFilters
from .prompts import (
    HistoryEntry,
    MemberFeatures,
    PostFeatures,
    PromptOptions,
    render_member_prompt,
    render_post_prompt,
)
from .tokenizer import Vocab

log = logging.getLogger(__name__)

EVENT_KINDS = ("item_created", "item_updated", "member_created", "member_interaction")
DEFAULT_WINDOWS = {"item_created": 60.0, "item_updated": 1800.0, "member_created": 60.0, "member_interaction": 1800.0}
POSITIVE_ACTIONS = ("like", "comment", "share", "long_view")
ACTIONS = ("impression",) + POSITIVE_ACTIONS
_UPDATABLE = {f for f in PostFeatures.__dataclass_fields__ if f not in ("post_id", "author_id", "created_at")}
MAX_HISTORY = 64


class EventValidationError(ValueError):
    pass


class NotYetProcessedError(LookupError):
    """The member exists in the activity log but no drain has embedded them yet."""


class UnknownMemberError(LookupError):
    """No member_created event was ever ingested for this id."""


class NearlineBatchError(RuntimeError):
    def __init__(self, message: str, manifest: Mapping):
        super().__init__(message)
        self.manifest = dict(manifest)


@dataclass(frozen=True)
class ActivityEvent:
    event_time: float
    kind: str
    subject_id: str
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"event_time": self.event_time, "kind": self.kind, "subject_id": self.subject_id,
                "payload": dict(self.payload)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ActivityEvent":
        missing = {"event_time", "kind", "subject_id"} - set(d)
        if missing:
            raise EventValidationError(f"event missing fields {sorted(missing)}")
        return cls(float(d["event_time"]), str(d["kind"]), str(d["subject_id"]), dict(d.get("payload") or {}))


@dataclass(frozen=True)
class WindowConfig:
    windows: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WINDOWS))

    def __post_init__(self):
        merged = {**DEFAULT_WINDOWS, **dict(self.windows)}
        unknown = set(merged) - set(EVENT_KINDS)
        if unknown:
            raise ValueError(f"unknown event classes in windows: {sorted(unknown)}")
        for kind, w in merged.items():
            if not w > 0:
                raise ValueError(f"window for {kind} must be > 0, got {w}")
        object.__setattr__(self, "windows", {k: float(merged[k]) for k in EVENT_KINDS})

    def __getitem__(self, kind: str) -> float:
        return self.windows[kind]


class MemberEmbeddingStore:
    """member_id -> (embedding, version, updated_at); versions grow by one per write."""

    def __init__(self):
        self._rows: dict[str, tuple[np.ndarray, int, float]] = {}

    def upsert(self, member_id: str, embedding: np.ndarray, updated_at: float) -> int:
        prev = self._rows.get(member_id)
        version = 1 if prev is None else prev[1] + 1
        self._rows[member_id] = (np.asarray(embedding, dtype=np.float64).copy(), version, float(updated_at))
        return version

    def get(self, member_id: str) -> tuple[np.ndarray, int, float] | None:
        return self._rows.get(member_id)

    def __contains__(self, member_id: str) -> bool:
        return member_id in self._rows

    def __len__(self) -> int:
        return len(self._rows)


# -- freshness -----------------------------------------------------------------


@dataclass
class FreshnessReport:
    """Per event class lags (simulated seconds) against the class SLA."""

    lags: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in EVENT_KINDS})
    sla: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WINDOWS))

    def add(self, kind: str, lag: float) -> None:
        if lag < 0:
            raise AssertionError(f"negative lag {lag} for {kind}")
        self.lags[kind].append(lag)

    def extend(self, other: "FreshnessReport") -> None:
        for k, v in other.lags.items():
            self.lags[k].extend(v)

    @property
    def empty(self) -> bool:
        return not any(self.lags.values())

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for kind in EVENT_KINDS:
            lag = np.asarray(self.lags[kind], dtype=np.float64)
            if lag.size == 0:
                out[kind] = {"count": 0, "mean": float("nan"), "p50": float("nan"), "p99": float("nan"),
                             "max": float("nan"), "violations": 0}
                continue
            out[kind] = {
                "count": int(lag.size),
                "mean": float(lag.mean()),
                "p50": float(np.percentile(lag, 50)),
                "p99": float(np.percentile(lag, 99)),
                "max": float(lag.max()),
                "violations": int((lag > self.sla[kind]).sum()),
            }
        return out

    def write_csv(self, path: str | Path) -> None:
        cols = ("event_class", "count", "mean_lag_s", "p50_lag_s", "p99_lag_s", "max_lag_s", "sla_s", "violations")
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for kind, s in self.summary().items():
                fmt = lambda x: "" if math.isnan(x) else f"{x:.3f}"  # noqa: E731
                w.writerow([kind, s["count"], fmt(s["mean"]), fmt(s["p50"]), fmt(s["p99"]), fmt(s["max"]),
                            f"{self.sla[kind]:.3f}", s["violations"]])


@dataclass(frozen=True)
class QueryTrace:
    time: float
    member_id: str
    k: int
    member_version: int | None
    results: tuple[tuple[str, float], ...]
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "time": self.time, "member_id": self.member_id, "k": self.k, "member_version": self.member_version,
            "results": [[i, round(s, 12)] for i, s in self.results], "error": self.error,
        }


# -- simulator -----------------------------------------------------------------


class NearlineSim:
    """Single logical worker per event class over a simulated clock.

    Args:
        model: encoder used for every regeneration.
        vocab: vocabulary for prompt rendering.
        windows: batching window per event class.
        tolerance: how far (seconds) an event may precede the latest one ingested.
    """

    def __init__(
        self,
        model: Encoder,
        vocab: Vocab,
        windows: WindowConfig | None = None,
        prompt_options: PromptOptions | None = None,
        tolerance: float = 0.0,
        start_time: float = 0.0,
    ):
        self.model = model
        self.vocab = vocab
        self.windows = windows or WindowConfig()
        self.opts = prompt_options or PromptOptions(truncate_post_tokens=60)
        self.tolerance = tolerance
        self.clock = float(start_time)
        self.index = FlatIndex(model.config.output_dim)
        self.members = MemberEmbeddingStore()
        self.report = FreshnessReport(sla=dict(self.windows.windows))
        self.serving_latency_ms: list[float] = []
        # feature store, updated as the clock passes each event
        self.items: dict[str, PostFeatures] = {}
        self.member_features: dict[str, MemberFeatures] = {}
        self.history: dict[str, list[tuple[float, str, str]]] = {}
        self.seen: dict[str, set[str]] = {}
        # ids declared by ingested (possibly not yet applied) creation events
        self._known_items: set[str] = set()
        self._known_members: set[str] = set()
        self._unapplied: list[tuple[float, int, ActivityEvent]] = []
        self._pending: dict[str, list[tuple[float, int, ActivityEvent]]] = {k: [] for k in EVENT_KINDS}
        self._seq = 0
        self._latest = -math.inf

    # -- ingest ----------------------------------------------------------------

    def _validate(self, ev: ActivityEvent) -> None:
        if ev.kind not in EVENT_KINDS:
            raise EventValidationError(f"unknown event kind {ev.kind!r}")
        if not math.isfinite(ev.event_time):
            raise EventValidationError("event_time must be finite")
        if ev.event_time < self._latest - self.tolerance:
            raise EventValidationError(
                f"out-of-order event at {ev.event_time} (latest {self._latest}, tolerance {self.tolerance})"
            )
        if ev.event_time < self.clock:
            raise EventValidationError(f"event at {ev.event_time} precedes the simulation clock {self.clock}")
        p = ev.payload
        if ev.kind == "item_created":
            if ev.subject_id in self._known_items:
                raise EventValidationError(f"item {ev.subject_id} already created")
            try:
                post = PostFeatures.from_dict({**p, "post_id": ev.subject_id})
            except (TypeError, ValueError) as exc:
                raise EventValidationError(f"item_created {ev.subject_id}: {exc}") from None
            if not post.author_id:
                raise EventValidationError(f"item_created {ev.subject_id}: author_id required")
        elif ev.kind == "item_updated":
            if ev.subject_id not in self._known_items:
                raise EventValidationError(f"item_updated for unknown item {ev.subject_id}")
            bad = set(p) - _UPDATABLE
            if bad or not p:
                raise EventValidationError(f"item_updated {ev.subject_id}: bad delta fields {sorted(bad) or 'none'}")
        elif ev.kind == "member_created":
            if ev.subject_id in self._known_members:
                raise EventValidationError(f"member {ev.subject_id} already created")
            try:
                MemberFeatures.from_dict({**p, "member_id": ev.subject_id})
            except (TypeError, ValueError) as exc:
                raise EventValidationError(f"member_created {ev.subject_id}: {exc}") from None
        else:
            if ev.subject_id not in self._known_members:
                raise EventValidationError(f"interaction by unknown member {ev.subject_id}")
            if p.get("item_id") not in self._known_items:
                raise EventValidationError(f"interaction on unknown item {p.get('item_id')!r}")
            if p.get("action") not in ACTIONS:
                raise EventValidationError(f"unknown interaction action {p.get('action')!r}")

    def ingest(self, event: ActivityEvent | Mapping) -> None:
        ev = event if isinstance(event, ActivityEvent) else ActivityEvent.from_dict(event)
        self._validate(ev)
        if ev.kind == "item_created":
            self._known_items.add(ev.subject_id)
        elif ev.kind == "member_created":
            self._known_members.add(ev.subject_id)
        self._latest = max(self._latest, ev.event_time)
        rec = (ev.event_time, self._seq, ev)
        self._seq += 1
        heapq.heappush(self._unapplied, rec)
        heapq.heappush(self._pending[ev.kind], rec)

    def ingest_many(self, events: Iterable[ActivityEvent | Mapping]) -> int:
        n = 0
        for ev in events:
            self.ingest(ev)
            n += 1
        return n

    def pending_counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self._pending.items()}

    # -- feature effects -------------------------------------------------------

    def _apply(self, ev: ActivityEvent) -> None:
        p = ev.payload
        if ev.kind == "item_created":
            self.items[ev.subject_id] = PostFeatures.from_dict({"created_at": ev.event_time, **p, "post_id": ev.subject_id})
        elif ev.kind == "item_updated":
            self.items[ev.subject_id] = replace(self.items[ev.subject_id], **p)
        elif ev.kind == "member_created":
            self.member_features[ev.subject_id] = MemberFeatures.from_dict({**p, "member_id": ev.subject_id})
            self.history.setdefault(ev.subject_id, [])
            self.seen.setdefault(ev.subject_id, set())
        else:
            item_id, action = p["item_id"], p["action"]
            post = self.items[item_id]
            # every interaction implies an impression, which keeps rates <= 100%
            delta = {"impression_count": post.impression_count + 1}
            if action == "like":
                delta["like_count"] = post.like_count + 1
            elif action == "long_view":
                delta["long_view_count"] = post.long_view_count + 1
                delta["view_count"] = post.view_count + 1
            self.items[item_id] = replace(post, **delta)
            label = "positive_PI" if action in POSITIVE_ACTIONS else "negative"
            hist = self.history[ev.subject_id]
            hist.append((ev.event_time, item_id, label))
            del hist[:-MAX_HISTORY]
            self.seen[ev.subject_id].add(item_id)

    # -- drains ----------------------------------------------------------------

    def _member_prompt(self, member_id: str):
        hist = [HistoryEntry(self.items[i], label, t) for t, i, label in self.history[member_id]]
        return render_member_prompt(self.member_features[member_id], hist, self.vocab, self.opts.max_context, self.opts)

    def _drain(self, kind: str, boundary: float) -> FreshnessReport:
        queue = self._pending[kind]
        batch = []
        while queue and queue[0][0] <= boundary:
            batch.append(heapq.heappop(queue))
        delta = FreshnessReport(sla=dict(self.windows.windows))
        if not batch:
            return delta
        if kind in ("item_created", "item_updated"):
            item_ids = sorted({ev.subject_id for _, _, ev in batch})
            member_ids: list[str] = []
        elif kind == "member_created":
            item_ids, member_ids = [], sorted({ev.subject_id for _, _, ev in batch})
        else:
            member_ids = sorted({ev.subject_id for _, _, ev in batch})
            item_ids = sorted({ev.payload["item_id"] for _, _, ev in batch})
        try:
            item_vecs = embed(self.model, [render_post_prompt(self.items[i], self.vocab, self.opts).token_ids
                                           for i in item_ids]) if item_ids else []
            member_vecs = embed(self.model, [self._member_prompt(m).token_ids for m in member_ids]) if member_ids else []
            if not (np.isfinite(item_vecs).all() and np.isfinite(member_vecs).all()):
                raise FloatingPointError("non-finite embedding")
        except Exception as exc:
            for rec in batch:
                heapq.heappush(queue, rec)
            manifest = {"event_class": kind, "boundary": boundary, "events": len(batch),
                        "items": item_ids, "members": member_ids, "error": repr(exc)}
            log.error("nearline batch aborted: %s", json.dumps(manifest, sort_keys=True))
            raise NearlineBatchError(f"{kind} batch at t={boundary} failed: {exc}", manifest) from exc
        for item_id, vec in zip(item_ids, item_vecs):
            post = self.items[item_id]
            attrs = ItemAttributes(post.author_id, frozenset({post.language}), post.trust_approved, post.created_at)
            self.index.upsert(IndexEntry(item_id, vec, attrs))
        for member_id, vec in zip(member_ids, member_vecs):
            self.members.upsert(member_id, vec, boundary)
        for t, _, _ in batch:
            delta.add(kind, boundary - t)
        return delta

    def _next_boundary(self, kind: str) -> float:
        w = self.windows[kind]
        return (math.floor(self.clock / w) + 1) * w

    def run_until(self, sim_time: float) -> FreshnessReport:
        """Advance the clock, applying events and firing every window boundary <= ``sim_time``."""
        if sim_time < self.clock:
            raise ValueError(f"clock is monotone: {sim_time} < {self.clock}")
        delta = FreshnessReport(sla=dict(self.windows.windows))
        while True:
            kind, boundary = min(((k, self._next_boundary(k)) for k in EVENT_KINDS), key=lambda kb: kb[1])
            # events at exactly a boundary are applied before it fires
            while self._unapplied and self._unapplied[0][0] <= min(boundary, sim_time):
                self._apply(heapq.heappop(self._unapplied)[2])
            if boundary > sim_time:
                break
            for k in EVENT_KINDS:  # same-instant boundaries fire in class order
                if self._next_boundary(k) == boundary:
                    delta.extend(self._drain(k, boundary))
            self.clock = boundary
        self.clock = float(sim_time)
        self.report.extend(delta)
        return delta

    def flush(self) -> FreshnessReport:
        """Run until every ingested event has been drained."""
        horizon = self.clock
        for kind, queue in self._pending.items():
            if queue:
                last = max(rec[0] for rec in queue)
                w = self.windows[kind]
                horizon = max(horizon, math.ceil(last / w) * w, self._next_boundary(kind))
        return self.run_until(horizon)

    # -- serving ---------------------------------------------------------------

    def serve_query(
        self,
        member_id: str,
        k: int,
        extra_filters: QueryFilters | None = None,
        now: float | None = None,
    ) -> list[tuple[str, float]]:
        """kNN for the member's stored embedding under their filters plus ``extra_filters``."""
        if now is not None and now > self.clock:
            self.run_until(now)
        row = self.members.get(member_id)
        if row is None:
            if member_id in self._known_members:
                raise NotYetProcessedError(f"member {member_id} created but not yet processed at t={self.clock}")
            raise UnknownMemberError(f"member {member_id} was never created")
        feats = self.member_features[member_id]
        base = QueryFilters(
            viewer_languages=feats.understood_languages,
            blocked_authors=feats.blocked_authors,
            seen_items=frozenset(self.seen.get(member_id, ())),
            require_trust=True,
        )
        t0 = time.perf_counter()
        out = self.index.knn(row[0], k, base.merged(extra_filters))
        self.serving_latency_ms.append((time.perf_counter() - t0) * 1e3)
        return out

    def trace_query(self, member_id: str, k: int, now: float | None = None,
                    extra_filters: QueryFilters | None = None) -> QueryTrace:
        """Like :meth:`serve_query` but records lookup errors instead of raising."""
        if now is not None and now > self.clock:
            self.run_until(now)
        try:
            res = self.serve_query(member_id, k, extra_filters)
        except NotYetProcessedError:
            return QueryTrace(self.clock, member_id, k, None, (), "not_yet_processed")
        except UnknownMemberError:
            return QueryTrace(self.clock, member_id, k, None, (), "unknown_member")
        return QueryTrace(self.clock, member_id, k, self.members.get(member_id)[1], tuple(res))


# -- streams -------------------------------------------------------------------


def read_events(path: str | Path) -> list[ActivityEvent]:
    events = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                events.append(ActivityEvent.from_dict(json.loads(line)))
            except (json.JSONDecodeError, EventValidationError, TypeError, ValueError) as exc:
                raise EventValidationError(f"{path}:{lineno}: {exc}") from None
    return events


def write_events(events: Iterable[ActivityEvent], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ev in events:
            f.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")


def random_event_stream(
    n_events: int,
    seed: int = 0,
    mean_gap_s: float = 2.0,
    initial_items: int = 40,
    initial_members: int = 20,
    languages: Sequence[str] = ("en", "en", "en", "fr", "de"),
) -> list[ActivityEvent]:
    """A plausible mixed activity stream with non-decreasing timestamps.

    The stream opens with a burst of item and member creations so that
    interactions always reference existing subjects.
    """
    rng = np.random.default_rng(seed)
    words = ["".join(rng.choice(list("abcdefghiklmnoprstuvwy"), size=rng.integers(3, 8))) for _ in range(300)]

    def text(n):
        return " ".join(rng.choice(words, size=n))

    events: list[ActivityEvent] = []
    items: list[str] = []
    members: list[str] = []
    authors = [f"a{j}" for j in range(30)]
    t = 0.0

    def new_item(t):
        iid = f"i{len(items):06d}"
        items.append(iid)
        payload = {"body_text": text(int(rng.integers(8, 30))), "author_id": str(rng.choice(authors)),
                   "author_name": text(2), "language": str(rng.choice(languages)),
                   "trust_approved": bool(rng.random() > 0.05), "impression_count": 1}
        return ActivityEvent(t, "item_created", iid, payload)

    def new_member(t):
        mid = f"m{len(members):05d}"
        members.append(mid)
        langs = sorted({str(rng.choice(languages)), "en"} if rng.random() < 0.9 else {str(rng.choice(languages))})
        blocked = sorted(set(rng.choice(authors, size=int(rng.integers(0, 3))).tolist()))
        payload = {"name": text(2), "headline": text(5), "skills": [text(1) for _ in range(3)],
                   "understood_languages": langs, "blocked_authors": blocked}
        return ActivityEvent(t, "member_created", mid, payload)

    while len(events) < n_events:
        if len(items) < initial_items:
            events.append(new_item(t))
        elif len(members) < initial_members:
            events.append(new_member(t))
        else:
            t += float(rng.exponential(mean_gap_s))
            u = rng.random()
            if u < 0.15:
                events.append(new_item(t))
            elif u < 0.20:
                events.append(new_member(t))
            elif u < 0.25:
                iid = str(rng.choice(items))
                events.append(ActivityEvent(t, "item_updated", iid, {"body_text": text(int(rng.integers(8, 30)))}))
            else:
                action = str(rng.choice(ACTIONS, p=[0.6, 0.2, 0.05, 0.05, 0.1]))
                events.append(ActivityEvent(t, "member_interaction", str(rng.choice(members)),
                                            {"item_id": str(rng.choice(items)), "action": action}))
    return events[:n_events]


def event_texts(events: Iterable[ActivityEvent]) -> list[str]:
    """Every free-text field in creation payloads, for building a vocabulary."""
    out = []
    for ev in events:
        for key, val in ev.payload.items():
            if key in ("author_id", "item_id", "action", "language", "understood_languages", "blocked_authors"):
                continue
            if isinstance(val, str):
                out.append(val)
            elif isinstance(val, (list, tuple)):
                out.extend(v for v in val if isinstance(v, str))
    return out


# -- scenarios -------------------------------------------------------------------


@dataclass
class ScenarioResult:
    report: FreshnessReport
    traces: list[QueryTrace]
    failures: list[str]
    sim: NearlineSim

    def write_traces(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tr in self.traces:
                f.write(json.dumps(tr.to_dict(), sort_keys=True) + "\n")


def scenario_events(spec: Mapping, base_dir: str | Path = ".") -> list[ActivityEvent]:
    """Events of a scenario (file, inline list and/or random stream), time-sorted stably."""
    events: list[ActivityEvent] = []
    if "events_file" in spec:
        events.extend(read_events(Path(base_dir) / spec["events_file"]))
    if "random_stream" in spec:
        events.extend(random_event_stream(**spec["random_stream"]))
    events.extend(ActivityEvent.from_dict(e) for e in spec.get("events", ()))
    return sorted(events, key=lambda e: e.event_time)


def scenario_vocab(events: Sequence[ActivityEvent], max_tokens: int = 4000) -> Vocab:
    """Vocabulary over the texts a scenario's prompts can contain."""
    from .prompts import ALL_MARKERS, SYSTEM_PROMPT, member_feature_texts, post_feature_texts
    from .tokenizer import build_vocab

    texts = [SYSTEM_PROMPT, " ".join(str(i) for i in range(101))]
    opts = PromptOptions()
    for ev in events:
        try:
            if ev.kind == "item_created":
                texts.extend(t for _, t in post_feature_texts(PostFeatures.from_dict({**ev.payload, "post_id": ev.subject_id}), opts))
            elif ev.kind == "member_created":
                texts.extend(t for _, t in member_feature_texts(MemberFeatures.from_dict({**ev.payload, "member_id": ev.subject_id})))
        except (TypeError, ValueError):
            continue  # rejected later by ingest with a proper reason
    texts.extend(event_texts(ev for ev in events if ev.kind == "item_updated"))
    return build_vocab(texts, ALL_MARKERS, max_tokens)


def _check_expectations(expect: Mapping, report: FreshnessReport, traces: Sequence[QueryTrace]) -> list[str]:
    failures = []
    summary = report.summary()
    for kind, limit in expect.get("max_lag", {}).items():
        s = summary[kind]
        if s["count"] and s["max"] > limit:
            failures.append(f"{kind}: max lag {s['max']:.3f}s exceeds {limit}s")
    for kind, count in expect.get("min_events", {}).items():
        if summary[kind]["count"] < count:
            failures.append(f"{kind}: only {summary[kind]['count']} processed events, expected >= {count}")
    for q in expect.get("queries", ()):
        tr = traces[q["index"]]
        got = [i for i, _ in tr.results]
        if "error" in q and tr.error != q["error"]:
            failures.append(f"query {q['index']}: error {tr.error!r}, expected {q['error']!r}")
        for item in q.get("contains", ()):
            if item not in got:
                failures.append(f"query {q['index']}: {item} missing from results")
        for item in q.get("excludes", ()):
            if item in got:
                failures.append(f"query {q['index']}: {item} must not be returned")
        if "top" in q and (not got or got[0] != q["top"]):
            failures.append(f"query {q['index']}: top result {got[:1]}, expected {q['top']!r}")
        if "num_results" in q and len(got) != q["num_results"]:
            failures.append(f"query {q['index']}: {len(got)} results, expected {q['num_results']}")
    return failures


def run_scenario(
    spec: Mapping,
    base_dir: str | Path = ".",
    windows: Mapping[str, float] | None = None,
    model: Encoder | None = None,
    vocab: Vocab | None = None,
) -> ScenarioResult:
    """Replay a scenario: ingest its events, serve its queries at their times, then flush.

    Queries run after every event with a timestamp <= the query time has been
    ingested, and see only state processed by then.
    """
    from .encoder import EncoderConfig, init_params

    events = scenario_events(spec, base_dir)
    if vocab is None:
        vocab = scenario_vocab(events)
    if model is None:
        enc = dict(spec.get("encoder", {}))
        enc.setdefault("hidden_dim", 16)
        enc.setdefault("seed", int(spec.get("seed", 0)))
        model = init_params(EncoderConfig(vocab_size=vocab.size, **enc))
    win = WindowConfig({**spec.get("windows", {}), **(windows or {})})
    sim = NearlineSim(model, vocab, win, PromptOptions(**spec.get("prompts", {"truncate_post_tokens": 60})),
                      tolerance=float(spec.get("tolerance", 0.0)))
    queries = sorted(enumerate(spec.get("queries", ())), key=lambda iq: (iq[1]["time"], iq[0]))
    traces: dict[int, QueryTrace] = {}
    pos = 0
    for qi, q in queries:
        while pos < len(events) and events[pos].event_time <= q["time"]:
            sim.ingest(events[pos])
            pos += 1
        traces[qi] = sim.trace_query(q["member_id"], int(q.get("k", 10)), now=float(q["time"]))
    for ev in events[pos:]:
        sim.ingest(ev)
    end = spec.get("end_time")
    if end is not None and end > sim.clock:
        sim.run_until(float(end))
    sim.flush()
    ordered = [traces[i] for i in range(len(traces))]
    return ScenarioResult(sim.report, ordered, _check_expectations(spec.get("expect", {}), sim.report, ordered), sim)
