"""Closed vocabulary shared by every synthetic task.

The vocab file holds one token string per line; the line number is the id.
Ids 0-7 are reserved specials. Bump ``VOCAB_VERSION`` whenever the list changes.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

VOCAB_VERSION = 1

PAD, BOS, EOS, IMG_BEGIN, IMG_END, IMG_CTX, PLUS, MINUS = range(8)
SPECIALS = ["<pad>", "<bos>", "<eos>", "<img>", "</img>", "<img_ctx>", "<+>", "<->"]

COLORS = ["red", "green", "blue", "yellow", "purple", "orange"]
SHAPES = ["square", "cross", "line", "dot"]
QUADRANTS = ["top_left", "top_right", "bottom_left", "bottom_right"]

WORDS = [
    "caption", "reverse", "answer", "empty", "and",
    "sum", "product", "then", "double", "triple", "add", "subtract", "all",
    *QUADRANTS, *COLORS, *SHAPES,
]
SYMBOLS = ["+", "-", "*", "=", ";", ":", "?"]
NUMBERS = [str(i) for i in range(100)]


def default_tokens(size: int = 256) -> list[str]:
    tokens = SPECIALS + NUMBERS + SYMBOLS + WORDS
    if len(tokens) > size:
        raise ValueError(f"vocabulary needs {len(tokens)} entries, size {size} too small")
    return tokens + [f"<unused_{i}>" for i in range(size - len(tokens))]


_TOKEN_RE = re.compile(r"<[^<>\s]+>|\d+|[A-Za-z_]+|[^\sA-Za-z\d]")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocab must start with the eight reserved specials")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocab contains duplicate tokens")
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def id(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise DataError(f"token {token!r} is not in the vocabulary") from None

    def encode(self, text: str) -> list[int]:
        """Split on numbers, words, specials and single punctuation marks."""
        return [self.id(piece) for piece in _TOKEN_RE.findall(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line != ""])

    @classmethod
    def default(cls, size: int = 256) -> Vocab:
        return cls(default_tokens(size))
