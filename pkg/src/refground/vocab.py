"""Tokenization, vocabulary construction, and the noun-lexicon filter."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
SPECIALS = (BOS, EOS, UNK)
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def _raw_tokens(text: str) -> list[str]:
    """Lowercased word tokens; punctuation splits, special markers pass through."""
    tokens: list[str] = []
    for chunk in text.lower().split():
        if chunk in SPECIALS:
            tokens.append(chunk)
            continue
        tokens.extend(chunk.translate(_PUNCT_TABLE).split())
    return tokens


def tokenize(text: str) -> list[str]:
    """Tokenize free text; degenerate input (no letters) yields a single UNK."""
    tokens = _raw_tokens(text)
    if not any(any(c.isalpha() for c in t) for t in tokens):
        return [UNK]
    return tokens


def has_content(text: str) -> bool:
    """True when the text tokenizes to at least one real (non-fallback) token."""
    return bool(_raw_tokens(text))


@dataclass(frozen=True)
class Expression:
    """A referring expression with its cached token list."""

    raw: str
    tokens: tuple[str, ...]

    @classmethod
    def from_text(cls, text: str) -> "Expression":
        return cls(raw=text, tokens=tuple(tokenize(text)))

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("expression must have at least one token")


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(compare=False)

    @classmethod
    def from_tokens(cls, tokens: list[str]) -> "Vocabulary":
        id_to_token = tuple(SPECIALS) + tuple(tokens)
        return cls(id_to_token=id_to_token,
                   token_to_id={t: i for i, t in enumerate(id_to_token)})

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens) -> list[int]:
        return [self.encode_token(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(corpus: list[Expression], min_count: int = 1) -> Vocabulary:
    """Vocabulary over tokens seen at least ``min_count`` times.

    Token ids are deterministic: specials at 0..2, then tokens sorted by
    descending frequency with ascending lexicographic tie-break.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for expr in corpus:
        counts.update(t for t in expr.tokens if t not in SPECIALS)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary.from_tokens(kept)


def contains_noun(tokens, noun_lexicon: set[str]) -> bool:
    """True iff any token is in the noun lexicon (evaluation-time pruning)."""
    if not noun_lexicon:
        raise ValueError("noun lexicon must be non-empty")
    return any(t in noun_lexicon for t in tokens)


def load_noun_lexicon(path: str | Path | None = None) -> set[str]:
    """Noun lexicon from a plain-text file (one token per line)."""
    if path is None:
        text = resources.files("refground.data").joinpath("nouns.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {line.strip().lower() for line in text.splitlines()
            if line.strip() and not line.startswith("#")}
