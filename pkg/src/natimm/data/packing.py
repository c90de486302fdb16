"""Greedy first-fit-decreasing packing with per-sample attention isolation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import CapacityError
from ..positions import PositionMap, compute_positions
from .samples import TokenSequence


@dataclass
class PackedBatch:
    seq: TokenSequence
    sample_ids: np.ndarray  # (T,) index into ``members``
    offsets: list[int]  # start of each member, plus a final end sentinel
    members: list[int]  # indices of the packed samples in the caller's list
    loss_counts: list[int]  # per member: number of loss-bearing tokens (l)

    def __len__(self) -> int:
        return len(self.seq)

    @property
    def n_samples(self) -> int:
        return len(self.members)

    @property
    def n_images(self) -> int:
        return len(self.seq.spans)

    def part(self, i: int) -> TokenSequence:
        a, b = self.offsets[i], self.offsets[i + 1]
        return self.seq_slice(a, b)

    def seq_slice(self, a: int, b: int) -> TokenSequence:
        spans = [(s - a, e - a) for s, e in self.seq.spans if a <= s and e <= b]
        images = [img for img, (s, e) in zip(self.seq.images, self.seq.spans) if a <= s and e <= b]
        return TokenSequence(self.seq.tokens[a:b], self.seq.modality[a:b], self.seq.loss_mask[a:b], images, spans)

    def images_per_sample(self) -> list[int]:
        counts = [0] * self.n_samples
        for s, _ in self.seq.spans:
            counts[int(self.sample_ids[s])] += 1
        return counts

    def positions(self, deltas: Sequence[float] | None = None) -> PositionMap:
        """Per-sample V2PE positions restarting at 0; ``deltas`` has one entry per image."""
        if deltas is None:
            deltas = [1.0] * self.n_images
        if len(deltas) != self.n_images:
            raise ValueError(f"{self.n_images} images but {len(deltas)} deltas")
        out = []
        k = 0
        for i in range(self.n_samples):
            part = self.part(i)
            d = list(deltas[k : k + len(part.spans)])
            k += len(part.spans)
            out.append(compute_positions(part.modality, part.spans, d).positions)
        return PositionMap(np.concatenate(out) if out else np.zeros(0), tuple(float(d) for d in deltas))

    def attention_mask(self) -> np.ndarray:
        return isolation_mask(self.sample_ids)


def isolation_mask(sample_ids: np.ndarray) -> np.ndarray:
    """allowed[i, j]: j <= i and both tokens belong to the same packed sample."""
    sid = np.asarray(sample_ids)
    n = len(sid)
    return np.tril(np.ones((n, n), dtype=bool)) & (sid[:, None] == sid[None, :])


def pack_sequences(seqs: Sequence[TokenSequence], members: Sequence[int] | None = None) -> PackedBatch:
    """Concatenate ``seqs`` as given into one batch (no capacity check)."""
    members = list(range(len(seqs))) if members is None else list(members)
    offsets = [0]
    for s in seqs:
        offsets.append(offsets[-1] + len(s))
    sample_ids = np.concatenate([np.full(len(s), i, dtype=np.int64) for i, s in enumerate(seqs)]) if seqs else np.zeros(0, np.int64)
    return PackedBatch(TokenSequence.concat(seqs), sample_ids, offsets, members, [s.loss_count for s in seqs])


def first_fit_decreasing(lengths: Sequence[int], capacity: int) -> list[list[int]]:
    """Bin indices by declining length; ties keep input order."""
    for i, n in enumerate(lengths):
        if n > capacity:
            raise CapacityError(f"sample {i} has {n} tokens, more than the window {capacity}")
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    bins: list[list[int]] = []
    room: list[int] = []
    for i in order:
        for b, free in enumerate(room):
            if lengths[i] <= free:
                bins[b].append(i)
                room[b] -= lengths[i]
                break
        else:
            bins.append([i])
            room.append(capacity - lengths[i])
    return bins


def pack(seqs: Sequence[TokenSequence], context_window: int) -> list[PackedBatch]:
    bins = first_fit_decreasing([len(s) for s in seqs], context_window)
    return [pack_sequences([seqs[i] for i in b], b) for b in bins]
