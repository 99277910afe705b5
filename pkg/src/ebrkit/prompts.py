"""Feature records and the prompt library that renders them into token prompts."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Literal, Mapping, Sequence

from .tokenizer import Vocab, tokenize

PostType = Literal["original", "group", "like_or_comment_share"]
ShareType = Literal["text", "image", "video", "job_change", "article"]
CountMode = Literal["raw", "quantized", "both"]
HistoryMode = Literal["all", "positive_only", "none"]

POST_TYPES = ("original", "group", "like_or_comment_share")
SHARE_TYPES = ("text", "image", "video", "job_change", "article")
COUNT_MODES = ("raw", "quantized", "both")
HISTORY_MODES = ("all", "positive_only", "none")

# Declared feature order; the marker index of a feature is its position + 1.
POST_FEATURE_ORDER = (
    "post_type",
    "share_type",
    "author_name",
    "author_headline",
    "author_company",
    "author_industry",
    "author_title",
    "like_count",
    "view_count",
    "long_view_count",
    "impression_count",
    "like_rate",
    "long_view_rate",
    "article_title",
    "article_source",
    "body_text",
)
MEMBER_FEATURE_ORDER = (
    "name",
    "headline",
    "summary",
    "industry",
    "location",
    "skills",
    "job_history",
    "education_history",
    "certifications",
    "languages_spoken",
)

POST_MARKERS = {f: f"<ST_P{i + 1}>" for i, f in enumerate(POST_FEATURE_ORDER)}
MEMBER_MARKERS = {f: f"<ST_M{i + 1}>" for i, f in enumerate(MEMBER_FEATURE_ORDER)}
SYSTEM_MARKER = "<ST_M0>"
HISTORY_MARKER = "<ST_history>"
HISTORY_POST_MARKER = "<ST_history_post>"
ALL_MARKERS = (
    tuple(POST_MARKERS.values())
    + (SYSTEM_MARKER,)
    + tuple(MEMBER_MARKERS.values())
    + (HISTORY_MARKER, HISTORY_POST_MARKER)
)

SYSTEM_PROMPT = (
    "The following is a member profile and the feed posts they interacted with. "
    "Describe what this member wants to read next."
)

_COUNT_LABELS = {
    "like_count": "likes",
    "view_count": "views",
    "long_view_count": "long views",
    "impression_count": "impressions",
}
_LIST_FIELDS = ("skills", "job_history", "education_history", "certifications", "languages_spoken")


@dataclass(frozen=True)
class PostFeatures:
    post_id: str
    body_text: str
    post_type: str = "original"
    share_type: str = "text"
    author_id: str = ""
    author_name: str = ""
    author_headline: str = ""
    author_company: str = ""
    author_industry: str = ""
    author_title: str = ""
    like_count: int = 0
    view_count: int = 0
    long_view_count: int = 0
    impression_count: int = 1
    article_title: str | None = None
    article_source: str | None = None
    language: str = "en"
    trust_approved: bool = True
    created_at: float = 0.0

    def __post_init__(self):
        if self.post_type not in POST_TYPES:
            raise ValueError(f"post {self.post_id}: unknown post_type {self.post_type!r}")
        if self.share_type not in SHARE_TYPES:
            raise ValueError(f"post {self.post_id}: unknown share_type {self.share_type!r}")
        for name in ("like_count", "view_count", "long_view_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"post {self.post_id}: {name} must be >= 0")
        if self.impression_count < 1:
            raise ValueError(f"post {self.post_id}: impression_count must be positive")
        if self.impression_count < max(self.like_count, self.long_view_count):
            raise ValueError(
                f"post {self.post_id}: impression_count must be >= like_count and long_view_count"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PostFeatures":
        return cls(**d)


@dataclass(frozen=True)
class MemberFeatures:
    member_id: str
    name: str = ""
    headline: str = ""
    summary: str = ""
    industry: str = ""
    location: str = ""
    skills: tuple[str, ...] = ()
    job_history: tuple[str, ...] = ()
    education_history: tuple[str, ...] = ()
    certifications: tuple[str, ...] = ()
    languages_spoken: tuple[str, ...] = ()
    blocked_authors: frozenset[str] = frozenset()
    understood_languages: frozenset[str] = frozenset({"en"})

    def __post_init__(self):
        for name in _LIST_FIELDS:
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "blocked_authors", frozenset(self.blocked_authors))
        object.__setattr__(self, "understood_languages", frozenset(self.understood_languages))
        if not self.understood_languages:
            raise ValueError(f"member {self.member_id}: understood_languages must be non-empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in _LIST_FIELDS:
            d[name] = list(d[name])
        d["blocked_authors"] = sorted(self.blocked_authors)
        d["understood_languages"] = sorted(self.understood_languages)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MemberFeatures":
        return cls(**d)


@dataclass(frozen=True)
class HistoryEntry:
    post: PostFeatures
    label: Literal["positive_PI", "negative"]
    event_time: float

    def __post_init__(self):
        if self.label not in ("positive_PI", "negative"):
            raise ValueError(f"unknown history label {self.label!r}")


@dataclass(frozen=True)
class Prompt:
    """Token ids plus ``(marker_id, start, end)`` spans, ``end`` exclusive."""

    token_ids: tuple[int, ...]
    segment_spans: tuple[tuple[int, int, int], ...]

    @property
    def total_len(self) -> int:
        return len(self.token_ids)

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class PromptOptions:
    truncate_post_tokens: int | None = None
    count_mode: str = "both"
    history_mode: str = "positive_only"
    max_context: int = 512

    def __post_init__(self):
        if self.truncate_post_tokens is not None and self.truncate_post_tokens < 1:
            raise ValueError("truncate_post_tokens must be >= 1 or None")
        if self.count_mode not in COUNT_MODES:
            raise ValueError(f"count_mode must be one of {COUNT_MODES}")
        if self.history_mode not in HISTORY_MODES:
            raise ValueError(f"history_mode must be one of {HISTORY_MODES}")
        if self.max_context < 1:
            raise ValueError("max_context must be positive")


def quantize_count(numerator: int, denominator: int) -> int:
    """Integer percent of ``numerator / denominator``, rounded half up."""
    if denominator <= 0:
        raise ValueError("denominator must be positive")
    if numerator < 0:
        raise ValueError("numerator must be non-negative")
    if numerator > denominator:
        raise ValueError(f"numerator {numerator} exceeds denominator {denominator}")
    # integer arithmetic keeps .5 cases exact
    return (200 * numerator + denominator) // (2 * denominator)


def post_feature_texts(post: PostFeatures, opts: PromptOptions) -> list[tuple[str, str]]:
    """Return ``(feature_name, text)`` pairs for every present feature, in declared order.

    The body text is returned untruncated; truncation happens on tokens.
    """
    raw = opts.count_mode in ("raw", "both")
    rates = opts.count_mode in ("quantized", "both")
    values: dict[str, str] = {
        "post_type": post.post_type.replace("_", " "),
        "share_type": post.share_type.replace("_", " "),
        "author_name": post.author_name,
        "author_headline": post.author_headline,
        "author_company": post.author_company,
        "author_industry": post.author_industry,
        "author_title": post.author_title,
        "article_title": post.article_title or "",
        "article_source": post.article_source or "",
        "body_text": post.body_text,
    }
    if raw:
        for name, label in _COUNT_LABELS.items():
            values[name] = f"{label} {getattr(post, name)}"
    if rates:
        values["like_rate"] = f"like rate {quantize_count(post.like_count, post.impression_count)} %"
        values["long_view_rate"] = (
            f"long view rate {quantize_count(post.long_view_count, post.impression_count)} %"
        )
    return [(f, values[f]) for f in POST_FEATURE_ORDER if values.get(f)]


def member_feature_texts(member: MemberFeatures) -> list[tuple[str, str]]:
    out = []
    for f in MEMBER_FEATURE_ORDER:
        v = getattr(member, f)
        text = " , ".join(v) if isinstance(v, tuple) else v
        if text:
            out.append((f, text))
    return out


def render_post_prompt(post: PostFeatures, vocab: Vocab, opts: PromptOptions = PromptOptions()) -> Prompt:
    """One marker-led segment per present feature; the body is truncated on tokens."""
    ids: list[int] = []
    spans: list[tuple[int, int, int]] = []
    for name, text in post_feature_texts(post, opts):
        marker = vocab.marker_id(POST_MARKERS[name])
        toks = tokenize(text, vocab)
        if name == "body_text" and opts.truncate_post_tokens is not None:
            toks = toks[: opts.truncate_post_tokens]
        start = len(ids)
        ids.append(marker)
        ids.extend(toks)
        spans.append((marker, start, len(ids)))
    return Prompt(tuple(ids), tuple(spans))


def _profile_prefix(member: MemberFeatures, vocab: Vocab) -> tuple[list[int], list[tuple[int, int, int]]]:
    ids: list[int] = []
    spans: list[tuple[int, int, int]] = []
    segments = [(SYSTEM_MARKER, SYSTEM_PROMPT)]
    segments += [(MEMBER_MARKERS[f], t) for f, t in member_feature_texts(member)]
    for marker_str, text in segments:
        marker = vocab.marker_id(marker_str)
        start = len(ids)
        ids.append(marker)
        ids.extend(tokenize(text, vocab))
        spans.append((marker, start, len(ids)))
    return ids, spans


def select_history(history: Iterable[HistoryEntry], mode: str) -> list[HistoryEntry]:
    """Filter by history mode and order newest first (ties by post id)."""
    if mode == "none":
        return []
    entries = [h for h in history if mode == "all" or h.label == "positive_PI"]
    entries.sort(key=lambda h: (-h.event_time, h.post.post_id))
    return entries


def render_member_prompt(
    member: MemberFeatures,
    history: Sequence[HistoryEntry],
    vocab: Vocab,
    budget: int | None = None,
    opts: PromptOptions = PromptOptions(),
    post_cache: Mapping[str, Prompt] | None = None,
) -> Prompt:
    """System prompt, profile segments, then as many whole history posts as fit.

    History posts are packed newest first; the first post that would overflow
    ``budget`` is dropped together with every older post.

    Args:
        post_cache: pre-rendered post prompts keyed by post id, rendered with
            the same ``opts``; missing entries are rendered on the fly.
    """
    budget = opts.max_context if budget is None else budget
    ids, spans = _profile_prefix(member, vocab)
    needed = len(ids) + (opts.history_mode != "none")
    if needed > budget:
        raise ValueError(
            f"member {member.member_id}: budget {budget} too small for profile ({needed} tokens)"
        )
    if opts.history_mode == "none":
        return Prompt(tuple(ids), tuple(spans))

    hist_marker = vocab.marker_id(HISTORY_MARKER)
    post_marker = vocab.marker_id(HISTORY_POST_MARKER)
    spans.append((hist_marker, len(ids), len(ids) + 1))
    ids.append(hist_marker)
    for entry in select_history(history, opts.history_mode):
        rendered = post_cache.get(entry.post.post_id) if post_cache is not None else None
        if rendered is None:
            rendered = render_post_prompt(entry.post, vocab, opts)
        if len(ids) + 1 + len(rendered) > budget:
            break
        start = len(ids)
        ids.append(post_marker)
        ids.extend(rendered.token_ids)
        spans.append((post_marker, start, len(ids)))
    return Prompt(tuple(ids), tuple(spans))
