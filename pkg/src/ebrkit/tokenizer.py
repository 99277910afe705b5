"""Deterministic word-level tokenizer with single-token special markers."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

UNK = "<unk>"

_WORD_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class Vocab:
    """Immutable token table.

    Regular tokens occupy ids ``0..R-1``, special markers ``R..R+M-1`` and the
    unknown token is the final id.
    """

    regular_tokens: Mapping[str, int]
    special_tokens: Mapping[str, int]
    unk_id: int
    _id_to_token: tuple[str, ...] = field(repr=False, compare=False, default=())
    _marker_re: re.Pattern | None = field(repr=False, compare=False, default=None)

    @property
    def size(self) -> int:
        return len(self.regular_tokens) + len(self.special_tokens) + 1

    def __len__(self) -> int:
        return self.size

    def token(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def marker_id(self, marker: str) -> int:
        return self.special_tokens[marker]

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    @property
    def _special_ids(self) -> frozenset[int]:
        return frozenset(self.special_tokens.values())


def _make_vocab(regular: Sequence[str], markers: Sequence[str]) -> Vocab:
    reg = {tok: i for i, tok in enumerate(regular)}
    spec = {m: len(reg) + j for j, m in enumerate(markers)}
    unk_id = len(reg) + len(spec)
    id_to_token = tuple(regular) + tuple(markers) + (UNK,)
    marker_re = None
    if markers:
        # longest first so a marker that prefixes another never wins
        alts = sorted(markers, key=lambda m: (-len(m), m))
        marker_re = re.compile("(" + "|".join(re.escape(m) for m in alts) + ")")
    return Vocab(reg, spec, unk_id, id_to_token, marker_re)


def split_words(text: str) -> list[str]:
    """Whitespace + punctuation split used for both vocab building and tokenizing."""
    return _WORD_RE.findall(text)


def _split_markers(text: str, vocab: Vocab) -> list[tuple[bool, str]]:
    if vocab._marker_re is None:
        return [(False, text)]
    out = []
    for i, piece in enumerate(vocab._marker_re.split(text)):
        if piece:
            out.append((i % 2 == 1, piece))
    return out


def build_vocab(
    corpus_texts: Iterable[str],
    marker_strings: Sequence[str],
    max_regular_tokens: int | None = None,
) -> Vocab:
    """Build a most-frequent-first word vocabulary plus marker tokens.

    Frequency ties are broken lexicographically. Marker strings found in the
    corpus are never counted as words.
    """
    markers = list(marker_strings)
    if len(set(markers)) != len(markers):
        raise ValueError("marker strings must be distinct")
    if any(not m or m.isspace() for m in markers):
        raise ValueError("marker strings must be non-empty")
    if UNK in markers:
        raise ValueError(f"{UNK!r} is reserved")

    probe = _make_vocab([], markers)
    counts: Counter[str] = Counter()
    seen_any = False
    for text in corpus_texts:
        seen_any = True
        for is_marker, piece in _split_markers(text, probe):
            if not is_marker:
                counts.update(split_words(piece))
    if not seen_any or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_regular_tokens is not None:
        ranked = ranked[:max_regular_tokens]
    return _make_vocab([tok for tok, _ in ranked], markers)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Map text to ids; markers are matched before word splitting."""
    ids: list[int] = []
    reg = vocab.regular_tokens
    unk = vocab.unk_id
    for is_marker, piece in _split_markers(text, vocab):
        if is_marker:
            ids.append(vocab.special_tokens[piece])
        else:
            ids.extend(reg.get(w, unk) for w in split_words(piece))
    return ids


def detokenize(token_ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.token(i) for i in token_ids)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    """Write one ``id<TAB>kind<TAB>token`` line per entry."""
    lines = []
    for i, tok in enumerate(vocab._id_to_token):
        if i == vocab.unk_id:
            kind = "unk"
        elif tok in vocab.special_tokens:
            kind = "special"
        else:
            kind = "regular"
        lines.append(f"{i}\t{kind}\t{tok}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    regular: list[str] = []
    markers: list[str] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        try:
            idx, kind, tok = line.split("\t")
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed vocab line") from None
        if kind == "regular":
            regular.append(tok)
        elif kind == "special":
            markers.append(tok)
        elif kind != "unk":
            raise ValueError(f"{path}:{lineno}: unknown token kind {kind!r}")
        if int(idx) != lineno - 1:
            raise ValueError(f"{path}:{lineno}: ids must be dense and ordered")
    return _make_vocab(regular, markers)
