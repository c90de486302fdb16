"""Token sequences, samples and the record types the tasks exchange."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DataError, StructuralError
from ..positions import TEXT, VISUAL
from ..vocab import BOS, EOS, IMG_BEGIN, IMG_CTX, IMG_END, Vocab

PALETTE_SIZE = 16
PATCH_SIZE = 2
LANGUAGE = "language"
MULTIMODAL = "multimodal"


@dataclass(frozen=True)
class SyntheticImage:
    """A small grid of palette indices (0 is blank)."""

    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.int64)
        if grid.ndim != 2:
            raise DataError(f"image grid must be 2-D, got shape {grid.shape}")
        if grid.size and (grid.min() < 0 or grid.max() >= PALETTE_SIZE):
            raise DataError(f"image values must lie in [0, {PALETTE_SIZE})")
        object.__setattr__(self, "grid", grid)

    @property
    def h(self) -> int:
        return self.grid.shape[0]

    @property
    def w(self) -> int:
        return self.grid.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, SyntheticImage) and np.array_equal(self.grid, other.grid)

    def __hash__(self) -> int:
        return hash(self.grid.tobytes())

    def to_json(self) -> dict:
        return {"h": self.h, "w": self.w, "grid": self.grid.reshape(-1).tolist()}

    @classmethod
    def blank(cls, h: int = 16, w: int = 16) -> SyntheticImage:
        return cls(np.zeros((h, w), dtype=np.int64))


def visual_token_count(image: SyntheticImage, patch_size: int = PATCH_SIZE) -> int:
    """Tokens an image occupies after patching and 2x2 unshuffle."""
    if image.h % (2 * patch_size) or image.w % (2 * patch_size):
        raise StructuralError(f"image {image.h}x{image.w} not divisible into 2x2 blocks of {patch_size}-cell patches")
    return (image.h // patch_size // 2) * (image.w // patch_size // 2)


@dataclass
class TokenSequence:
    tokens: np.ndarray
    modality: np.ndarray
    loss_mask: np.ndarray
    images: list[SyntheticImage] = field(default_factory=list)
    spans: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.modality = np.asarray(self.modality, dtype=np.uint8)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        self.spans = [(int(a), int(b)) for a, b in self.spans]
        n = len(self.tokens)
        if len(self.modality) != n or len(self.loss_mask) != n:
            raise StructuralError("tokens, modality and loss_mask must have equal length")
        if len(self.images) != len(self.spans):
            raise StructuralError(f"{len(self.images)} images but {len(self.spans)} spans")
        if (self.loss_mask & (self.modality == VISUAL)).any():
            raise StructuralError("a visual token carries loss")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text_count(self) -> int:
        return int((self.modality == TEXT).sum())

    @property
    def visual_count(self) -> int:
        return int((self.modality == VISUAL).sum())

    @property
    def loss_count(self) -> int:
        # position 0 has no left context, so it can never be predicted
        return int(self.loss_mask[1:].sum())

    def visual_rows(self) -> np.ndarray:
        if not self.spans:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(a, b) for a, b in self.spans])

    def extend_text(self, ids: Sequence[int], loss: bool = False) -> TokenSequence:
        ids = np.asarray(ids, dtype=np.int64)
        return TokenSequence(
            np.concatenate([self.tokens, ids]),
            np.concatenate([self.modality, np.full(len(ids), TEXT, dtype=np.uint8)]),
            np.concatenate([self.loss_mask, np.full(len(ids), loss)]),
            list(self.images),
            list(self.spans),
        )

    def prefix(self, n: int) -> TokenSequence:
        spans = [(a, b) for a, b in self.spans if b <= n]
        if any(a < n < b for a, b in self.spans):
            raise StructuralError("prefix would cut through an image span")
        images = self.images[: len(spans)]
        return TokenSequence(self.tokens[:n], self.modality[:n], self.loss_mask[:n], images, spans)

    def equals(self, other: TokenSequence) -> bool:
        return (
            np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.modality, other.modality)
            and np.array_equal(self.loss_mask, other.loss_mask)
            and self.images == other.images
            and self.spans == other.spans
        )

    @staticmethod
    def concat(parts: Sequence[TokenSequence]) -> TokenSequence:
        offset = 0
        images: list[SyntheticImage] = []
        spans: list[tuple[int, int]] = []
        for p in parts:
            images.extend(p.images)
            spans.extend((a + offset, b + offset) for a, b in p.spans)
            offset += len(p)
        return TokenSequence(
            np.concatenate([p.tokens for p in parts]) if parts else np.zeros(0, np.int64),
            np.concatenate([p.modality for p in parts]) if parts else np.zeros(0, np.uint8),
            np.concatenate([p.loss_mask for p in parts]) if parts else np.zeros(0, bool),
            images,
            spans,
        )


def build_sequence(
    vocab: Vocab,
    prompt: str,
    target: str = "",
    image: SyntheticImage | None = None,
    eos: bool = True,
) -> TokenSequence:
    """[bos] ([img] visual... [/img]) prompt target [eos]; loss on target and eos."""
    tokens = [BOS]
    modality = [TEXT]
    spans = []
    images = []
    if image is not None:
        n_vis = visual_token_count(image)
        tokens.append(IMG_BEGIN)
        start = len(tokens)
        tokens.extend([IMG_CTX] * n_vis)
        spans.append((start, start + n_vis))
        tokens.append(IMG_END)
        modality.extend([TEXT] + [VISUAL] * n_vis + [TEXT])
        images.append(image)
    prompt_ids = vocab.encode(prompt)
    target_ids = vocab.encode(target) + ([EOS] if eos else [])
    mask = [False] * (len(tokens) + len(prompt_ids)) + [True] * len(target_ids)
    tokens += prompt_ids + target_ids
    modality += [TEXT] * (len(prompt_ids) + len(target_ids))
    return TokenSequence(np.array(tokens), np.array(modality), np.array(mask), images, spans)


@dataclass
class Sample:
    kind: str
    text: str
    target: str
    image: SyntheticImage | None = None
    meta: dict = field(default_factory=dict)
    _seq: TokenSequence | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in (LANGUAGE, MULTIMODAL):
            raise DataError(f"unknown sample kind {self.kind!r}")
        if self.kind == LANGUAGE and self.image is not None:
            raise DataError("language samples carry no image")

    def sequence(self, vocab: Vocab) -> TokenSequence:
        if self._seq is None:
            self._seq = build_sequence(vocab, self.text, self.target, self.image)
        return self._seq

    def key(self) -> tuple:
        return (self.kind, self.text, self.target, self.image)


@dataclass
class PreferencePair:
    query: str
    chosen: str
    rejected: str
    image: SyntheticImage | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise DataError("chosen and rejected responses are identical")

    def key(self) -> tuple:
        return (self.query, self.chosen, self.rejected, self.image)


@dataclass
class StepwiseSolution:
    question: str
    steps: list[str]
    labels: list[bool] | None = None
    image: SyntheticImage | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.steps:
            raise StructuralError("a stepwise solution needs at least one step")
        if self.labels is not None and len(self.labels) != len(self.steps):
            raise StructuralError(f"{len(self.steps)} steps but {len(self.labels)} labels")

    def key(self) -> tuple:
        return (self.question, tuple(self.steps), None if self.labels is None else tuple(self.labels), self.image)
