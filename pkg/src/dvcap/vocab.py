"""Tokenization and the word vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(sentence: str | Sequence[str]) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace.  Token lists pass through."""
    if not isinstance(sentence, str):
        return list(sentence)
    return _PUNCT.sub(" ", sentence.lower()).split()


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {w: i for i, w in enumerate(self.tokens)}
        for w in words:
            self.add(w)

    @classmethod
    def build(cls, sentences: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for s in sentences for w in tokenize(s))
        return cls(sorted(w for w, c in counts.items() if c >= min_count and w not in RESERVED))

    def add(self, word: str) -> int:
        if word in RESERVED:
            raise ValueError(f"{word!r} is a reserved token")
        if word not in self.index:
            self.index[word] = len(self.tokens)
            self.tokens.append(word)
        return self.index[word]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, sentence: str | Sequence[str], add_eos: bool = True) -> list[int]:
        ids = [self.index.get(w, UNK) for w in tokenize(sentence)]
        return ids + [EOS] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def to_text(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))
