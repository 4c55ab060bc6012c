"""Whitespace/punctuation tokenizer over a fixed word vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Optional

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

_WORD = re.compile(r"[^\W_]+")


def split_words(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation; punctuation is dropped."""
    return _WORD.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def word(self, idx: int) -> str:
        return self.tokens[idx]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        """Reserved tokens first, then words by descending count, ties alphabetical."""
        counts = Counter(w for text in texts for w in split_words(text))
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(list(RESERVED) + [w for w in words if w not in RESERVED])

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def tokenize(text: str, vocab: Vocab, max_len: Optional[int] = None) -> list[int]:
    ids = [vocab.id(w) for w in split_words(text)]
    return ids[:max_len] if max_len is not None else ids
