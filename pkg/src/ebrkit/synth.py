"""Deterministic synthetic feed corpus with a latent ground truth.

Members and items live on a topic simplex. Item text is sampled from
topic-conditioned vocabularies and item like rates appear only through the
count features, so text is the one channel from the latent truth to a model.
Engagement is Bernoulli with probability
``sigmoid(member . item + popularity_weight * popularity - bias)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .negatives import EngagementRow, read_engagement_log
from .prompts import HistoryEntry, MemberFeatures, PostFeatures
from .tensorfile import read_tensors, write_tensors

FILLER_WORDS = (
    "the a an and or but of to in on for with at by from about as into like through after over "
    "between out against during without before under around among this that these those it its "
    "we our you your they their he she i my me us them is are was were be been being have has had "
    "do does did will would can could should may might must just very really so more most some any "
    "all each every new good great best big small next last first many much other own same such "
    "only also than then now here there when where why how what which who today week year time "
    "team people work way day thing part help share think know see look make take get read"
).split()

_ONSETS = "b c d f g h j k l m n p r s t v w z br cr dr fl gr pl pr st tr".split()
_VOWELS = "a e i o u ai ea io ou".split()
_CODAS = ["", "", "n", "r", "s", "l", "x", "m"]

POST_TYPE_P = (0.7, 0.15, 0.15)
SHARE_TYPE_P = (0.45, 0.2, 0.1, 0.05, 0.2)
LANGS = ("en", "fr", "de")


@dataclass(frozen=True)
class GenConfig:
    num_members: int = 5000
    num_items: int = 20000
    num_topics: int = 20
    vocab_per_topic: int = 40
    engagement_rate: float = 0.25
    impression_rate: float = 0.8
    popularity_skew: float = 0.8
    popularity_weight: float = 1.0
    affinity_scale: float = 10.0
    member_topic_alpha: float = 0.3
    item_topic_alpha: float = 0.1
    history_impressions: int = 24
    train_impressions: int = 16
    eval_members: int = 1000
    eval_pool_size: int = 100
    body_len_min: int = 40
    body_len_max: int = 120
    topic_word_frac: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_members", "num_items", "num_topics", "vocab_per_topic", "eval_pool_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("engagement_rate", "impression_rate", "topic_word_frac"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")
        if self.popularity_skew < 0 or self.popularity_weight < 0:
            raise ValueError("popularity_skew and popularity_weight must be >= 0")
        if not 1 <= self.body_len_min <= self.body_len_max:
            raise ValueError("need 1 <= body_len_min <= body_len_max")
        if self.eval_members > self.num_members:
            raise ValueError("eval_members cannot exceed num_members")
        if self.eval_pool_size + self.history_impressions + self.train_impressions > self.num_items:
            raise ValueError("catalog too small for the requested impressions per member")
        if self.vocab_per_topic < 5:
            raise ValueError("vocab_per_topic must be >= 5 to write headlines and skills")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentTruth:
    member_ids: list[str]
    item_ids: list[str]
    member_vecs: np.ndarray
    item_vecs: np.ndarray
    popularity: np.ndarray
    popularity_weight: float
    engagement_bias: float

    def __post_init__(self):
        self._m = {m: i for i, m in enumerate(self.member_ids)}
        self._i = {it: i for i, it in enumerate(self.item_ids)}

    def member_index(self, member_ids: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self._m[m] for m in member_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"member {exc.args[0]!r} not in latent truth") from None

    def item_index(self, item_ids: Iterable[str]) -> np.ndarray:
        try:
            return np.array([self._i[i] for i in item_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"item {exc.args[0]!r} not in latent truth") from None

    def scores(self, member_id: str, item_ids: Sequence[str]) -> np.ndarray:
        m = self.member_vecs[self.member_index([member_id])[0]]
        idx = self.item_index(item_ids)
        return self.item_vecs[idx] @ m + self.popularity_weight * self.popularity[idx]

    def engagement_prob(self, member_id: str, item_ids: Sequence[str]) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-(self.scores(member_id, item_ids) - self.engagement_bias)))

    def save(self, path: str | Path) -> None:
        write_tensors(
            path,
            {"member_vecs": self.member_vecs, "item_vecs": self.item_vecs, "popularity": self.popularity},
            meta={
                "member_ids": self.member_ids,
                "item_ids": self.item_ids,
                "popularity_weight": self.popularity_weight,
                "engagement_bias": self.engagement_bias,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "LatentTruth":
        t, meta = read_tensors(path)
        return cls(
            meta["member_ids"], meta["item_ids"], t["member_vecs"], t["item_vecs"], t["popularity"],
            meta["popularity_weight"], meta["engagement_bias"],
        )


class RankingOracle:
    """Ground-truth scorer: latent dot product plus weighted popularity."""

    def __init__(self, truth: LatentTruth):
        self.truth = truth

    def score(self, member_id: str, item_ids: Sequence[str]) -> np.ndarray:
        return self.truth.scores(member_id, item_ids)

    def top(self, member_id: str, item_ids: Sequence[str], n: int) -> list[str]:
        s = self.score(member_id, item_ids)
        order = sorted(range(len(item_ids)), key=lambda j: (-s[j], item_ids[j]))
        return [item_ids[j] for j in order[:n]]


def oracle_from_truth(truth: LatentTruth) -> RankingOracle:
    return RankingOracle(truth)


@dataclass
class Corpus:
    """Everything a training/eval run reads. ``truth`` is for oracles only."""

    members: dict[str, MemberFeatures]
    items: dict[str, PostFeatures]
    engagement_log: list[EngagementRow]
    history: dict[str, list[HistoryEntry]]
    train_pairs: list[tuple[str, str]]
    eval_sessions: dict[str, list[str]]
    truth: LatentTruth | None = None
    config: GenConfig | None = None


# -- generation ------------------------------------------------------------


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 200 * count + 1000:
            raise ValueError("could not generate enough distinct words")
        n_syl = int(rng.integers(2, 4))
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syl)
        ) + _CODAS[rng.integers(len(_CODAS))]
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _fit_bias(scores: np.ndarray, target: float) -> float:
    lo, hi = float(scores.min()) - 50.0, float(scores.max()) + 50.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _sigmoid(scores - mid).mean() > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class _World:
    def __init__(self, cfg: GenConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        rng = self.rng
        taken = set(FILLER_WORDS)
        self.topic_words = [
            _pseudo_words(rng, cfg.vocab_per_topic, taken) for _ in range(cfg.num_topics)
        ]
        self.industries = _pseudo_words(rng, cfg.num_topics, taken)
        self.first_names = [w.capitalize() for w in _pseudo_words(rng, 60, taken)]
        self.last_names = [w.capitalize() for w in _pseudo_words(rng, 80, taken)]
        self.companies = [w.capitalize() for w in _pseudo_words(rng, 40, taken)]
        self.cities = [w.capitalize() for w in _pseudo_words(rng, 25, taken)]
        self.schools = [w.capitalize() for w in _pseudo_words(rng, 20, taken)]
        self.outlets = [w.capitalize() for w in _pseudo_words(rng, 12, taken)]
        self.titles = ["engineer", "manager", "director", "analyst", "designer", "consultant", "founder", "lead"]

        t = cfg.num_topics
        self.pi = rng.dirichlet(np.full(t, cfg.member_topic_alpha), size=cfg.num_members)
        self.theta = rng.dirichlet(np.full(t, cfg.item_topic_alpha), size=cfg.num_items)
        self.member_vecs = cfg.affinity_scale * self.pi
        self.popularity = rng.standard_normal(cfg.num_items)
        self.primary = self.theta.argmax(axis=1)
        self.by_topic = [np.flatnonzero(self.primary == k) for k in range(t)]

    def words_from_mixture(self, mix: np.ndarray, n: int, topic_frac: float) -> list[str]:
        rng = self.rng
        is_topic = rng.random(n) < topic_frac
        topics = rng.choice(len(mix), size=n, p=mix)
        wid = rng.integers(self.cfg.vocab_per_topic, size=n)
        fid = rng.integers(len(FILLER_WORDS), size=n)
        return [
            self.topic_words[topics[j]][wid[j]] if is_topic[j] else FILLER_WORDS[fid[j]] for j in range(n)
        ]


def _make_members(w: _World) -> dict[str, MemberFeatures]:
    cfg, rng = w.cfg, w.rng
    members = {}
    ids = [f"m{j:06d}" for j in range(cfg.num_members)]
    for j, mid in enumerate(ids):
        mix = w.pi[j]
        top = int(mix.argmax())
        company = w.companies[rng.integers(len(w.companies))]
        title = w.titles[rng.integers(len(w.titles))]
        head_words = w.words_from_mixture(mix, 3, 0.99)
        skills = tuple(dict.fromkeys(w.words_from_mixture(mix, 5, 0.99)))
        langs = {"en"}
        if rng.random() < 0.1:
            langs.add(LANGS[1 + rng.integers(2)])
        blocked = frozenset(ids[k] for k in rng.integers(cfg.num_members, size=rng.integers(0, 3)) if k != j)
        members[mid] = MemberFeatures(
            member_id=mid,
            name=f"{w.first_names[rng.integers(len(w.first_names))]} {w.last_names[rng.integers(len(w.last_names))]}",
            headline=" ".join(head_words) + f" {title} at {company}",
            summary=" ".join(w.words_from_mixture(mix, 12, 0.5)),
            industry=w.industries[top],
            location=w.cities[rng.integers(len(w.cities))],
            skills=skills,
            job_history=(f"{title} at {company}", f"{w.titles[rng.integers(len(w.titles))]} at "
                         f"{w.companies[rng.integers(len(w.companies))]}"),
            education_history=(f"{w.schools[rng.integers(len(w.schools))]} university",),
            certifications=(w.topic_words[top][rng.integers(cfg.vocab_per_topic)] + " certificate",)
            if rng.random() < 0.3 else (),
            languages_spoken=tuple({"en": "english", "fr": "french", "de": "german"}[x] for x in sorted(langs)),
            blocked_authors=blocked,
            understood_languages=frozenset(langs),
        )
    return members


def _make_items(w: _World, members: Mapping[str, MemberFeatures]) -> dict[str, PostFeatures]:
    cfg, rng = w.cfg, w.rng
    member_list = list(members.values())
    like_rate = _sigmoid(-2.2 + cfg.popularity_skew * w.popularity)
    lv_rate = _sigmoid(-1.6 + cfg.popularity_skew * w.popularity + 0.3 * rng.standard_normal(cfg.num_items))
    impressions = np.maximum(100, np.round(rng.lognormal(8.0, 1.0, size=cfg.num_items))).astype(np.int64)
    likes = rng.binomial(impressions, like_rate)
    long_views = rng.binomial(impressions, lv_rate)
    views = rng.binomial(impressions, 0.6)
    items = {}
    for j in range(cfg.num_items):
        iid = f"i{j:06d}"
        author = member_list[rng.integers(len(member_list))]
        mix = w.theta[j]
        body_len = int(rng.integers(cfg.body_len_min, cfg.body_len_max + 1))
        post_type = ("original", "group", "like_or_comment_share")[rng.choice(3, p=POST_TYPE_P)]
        share_type = ("text", "image", "video", "job_change", "article")[rng.choice(5, p=SHARE_TYPE_P)]
        article_title = article_source = None
        if share_type == "article":
            article_title = " ".join(w.words_from_mixture(mix, 5, 0.8))
            article_source = w.outlets[rng.integers(len(w.outlets))]
        r = rng.random()
        lang = "en" if r < 0.9 else ("fr" if r < 0.95 else "de")
        title_company = author.headline.split(" at ")
        items[iid] = PostFeatures(
            post_id=iid,
            body_text=" ".join(w.words_from_mixture(mix, body_len, cfg.topic_word_frac)),
            post_type=post_type,
            share_type=share_type,
            author_id=author.member_id,
            author_name=author.name,
            author_headline=author.headline,
            author_company=title_company[-1] if len(title_company) > 1 else "",
            author_industry=author.industry,
            author_title=author.job_history[0].split(" at ")[0] if author.job_history else "",
            like_count=int(likes[j]),
            view_count=int(views[j]),
            long_view_count=int(long_views[j]),
            impression_count=int(impressions[j]),
            article_title=article_title,
            article_source=article_source,
            language=lang,
            trust_approved=bool(rng.random() < 0.97),
            created_at=-float(rng.integers(1, 30 * 86400)),
        )
    return items


def _draw_impressions(w: _World, j: int, count: int, exclude: set[int]) -> list[int]:
    """Distinct item indices: a targeted fraction follows the member's topics."""
    cfg, rng = w.cfg, w.rng
    out: list[int] = []
    guard = 0
    while len(out) < count:
        guard += 1
        if guard > 100 * count:
            raise ValueError("could not draw distinct impressions; catalog too small")
        if rng.random() < cfg.impression_rate:
            topic = rng.choice(cfg.num_topics, p=w.pi[j])
            pool = w.by_topic[topic]
            cand = int(pool[rng.integers(len(pool))]) if len(pool) else int(rng.integers(cfg.num_items))
        else:
            cand = int(rng.integers(cfg.num_items))
        if cand not in exclude:
            exclude.add(cand)
            out.append(cand)
    return out


def generate(config: GenConfig) -> Corpus:
    """Build members, items, logs and the latent truth from ``config.seed``."""
    w = _World(config)
    members = _make_members(w)
    items = _make_items(w, members)
    rng = w.rng
    member_ids = list(members)
    item_ids = list(items)

    # calibrate the engagement bias on a targeted impression sample
    probe_m = rng.integers(config.num_members, size=4000)
    probe_i = np.array([_draw_impressions(w, int(m), 1, set())[0] for m in probe_m])
    probe_scores = (w.member_vecs[probe_m] * w.theta[probe_i]).sum(1) + config.popularity_weight * w.popularity[probe_i]
    bias = _fit_bias(probe_scores, config.engagement_rate)

    truth = LatentTruth(member_ids, item_ids, w.member_vecs, w.theta, w.popularity, config.popularity_weight, bias)

    day = 86400.0
    t_train, t_eval = 20 * day, 27 * day
    log: list[EngagementRow] = []
    history: dict[str, list[HistoryEntry]] = {}
    train_pairs: list[tuple[str, str]] = []
    eval_sessions: dict[str, list[str]] = {}
    eval_set = set(rng.choice(config.num_members, size=config.eval_members, replace=False).tolist())

    n_hist, n_train = config.history_impressions, config.train_impressions
    for j, mid in enumerate(member_ids):
        seen: set[int] = set()
        picks = _draw_impressions(w, j, n_hist + n_train, seen)
        scores = w.theta[picks] @ w.member_vecs[j] + config.popularity_weight * w.popularity[picks]
        engaged = rng.random(len(picks)) < _sigmoid(scores - bias)
        times = np.concatenate([
            np.sort(rng.uniform(0.0, t_train, size=n_hist)),
            np.sort(rng.uniform(t_train, t_eval, size=n_train)),
        ])
        hist = []
        for pos, (idx, eng, ts) in enumerate(zip(picks, engaged, times)):
            iid = item_ids[idx]
            ts = float(round(ts, 3))
            log.append(EngagementRow(mid, iid, True, bool(eng), ts))
            if pos < n_hist:
                hist.append(HistoryEntry(items[iid], "positive_PI" if eng else "negative", ts))
            elif eng:
                train_pairs.append((mid, iid))
        history[mid] = hist
        if j in eval_set:
            eval_sessions[mid] = [item_ids[k] for k in _draw_impressions(w, j, config.eval_pool_size, seen)]
    return Corpus(members, items, log, history, train_pairs, eval_sessions, truth, config)


# -- persistence -----------------------------------------------------------

CORPUS_FILES = ("members.jsonl", "items.jsonl", "history.jsonl", "engagements.jsonl",
                "train_pairs.jsonl", "eval_sessions.jsonl")


def _write_jsonl(path: Path, rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")))
            f.write("\n")


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError:
                    raise ValueError(f"{path}:{lineno}: invalid JSON") from None
    return out


def save_corpus(corpus: Corpus, out_dir: str | Path) -> dict[str, Path]:
    """Write corpus JSONL files to ``out_dir/corpus`` and the truth to ``out_dir/truth``."""
    out_dir = Path(out_dir)
    cdir, tdir = out_dir / "corpus", out_dir / "truth"
    cdir.mkdir(parents=True, exist_ok=True)
    tdir.mkdir(parents=True, exist_ok=True)
    _write_jsonl(cdir / "members.jsonl", (m.to_dict() for m in corpus.members.values()))
    _write_jsonl(cdir / "items.jsonl", (p.to_dict() for p in corpus.items.values()))
    _write_jsonl(
        cdir / "history.jsonl",
        ({"member_id": m, "post_id": h.post.post_id, "label": h.label, "event_time": h.event_time}
         for m, hs in corpus.history.items() for h in hs),
    )
    _write_jsonl(cdir / "engagements.jsonl", (r.to_dict() for r in corpus.engagement_log))
    _write_jsonl(cdir / "train_pairs.jsonl", ({"member_id": m, "item_id": i} for m, i in corpus.train_pairs))
    _write_jsonl(
        cdir / "eval_sessions.jsonl",
        ({"member_id": m, "item_ids": ids} for m, ids in corpus.eval_sessions.items()),
    )
    paths = {name: cdir / name for name in CORPUS_FILES}
    if corpus.config is not None:
        (out_dir / "gen_config.json").write_text(json.dumps(corpus.config.to_dict(), sort_keys=True, indent=2) + "\n")
    if corpus.truth is not None:
        corpus.truth.save(tdir / "latent.bin")
        paths["truth"] = tdir / "latent.bin"
    return paths


def load_corpus(data_dir: str | Path, with_truth: bool = True) -> Corpus:
    """Read a directory written by :func:`save_corpus`, validating every record."""
    data_dir = Path(data_dir)
    cdir = data_dir / "corpus"
    missing = [n for n in CORPUS_FILES if not (cdir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{cdir}: missing corpus files {missing}")
    members = {}
    for lineno, d in enumerate(_read_jsonl(cdir / "members.jsonl"), 1):
        try:
            m = MemberFeatures.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"members.jsonl:{lineno}: {exc}") from None
        if m.member_id in members:
            raise ValueError(f"members.jsonl:{lineno}: duplicate member_id {m.member_id}")
        members[m.member_id] = m
    items = {}
    for lineno, d in enumerate(_read_jsonl(cdir / "items.jsonl"), 1):
        try:
            p = PostFeatures.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"items.jsonl:{lineno}: {exc}") from None
        items[p.post_id] = p
    history: dict[str, list[HistoryEntry]] = {m: [] for m in members}
    for lineno, d in enumerate(_read_jsonl(cdir / "history.jsonl"), 1):
        try:
            history[d["member_id"]].append(HistoryEntry(items[d["post_id"]], d["label"], float(d["event_time"])))
        except KeyError as exc:
            raise ValueError(f"history.jsonl:{lineno}: unknown id {exc}") from None
    log = read_engagement_log(cdir / "engagements.jsonl")
    train_pairs = [(d["member_id"], d["item_id"]) for d in _read_jsonl(cdir / "train_pairs.jsonl")]
    eval_sessions = {d["member_id"]: list(d["item_ids"]) for d in _read_jsonl(cdir / "eval_sessions.jsonl")}
    for m, i in train_pairs:
        if m not in members or i not in items:
            raise ValueError(f"train_pairs.jsonl: unknown pair ({m}, {i})")
    truth = None
    if with_truth and (data_dir / "truth" / "latent.bin").exists():
        truth = LatentTruth.load(data_dir / "truth" / "latent.bin")
    cfg = None
    if (data_dir / "gen_config.json").exists():
        cfg = GenConfig(**json.loads((data_dir / "gen_config.json").read_text()))
    return Corpus(members, items, log, history, train_pairs, eval_sessions, truth, cfg)
