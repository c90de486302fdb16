"""Variable visual position encoding.

Text tokens advance the position index by 1, visual tokens by the increment
chosen for their image. Positions are real-valued and reach attention through
rotary phases evaluated at the real index.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import CapacityError, ConfigError, StructuralError

TEXT = 0
VISUAL = 1

# ordered largest first; 1 keeps the conventional integer encoding
DELTAS: tuple[float, ...] = tuple(1.0 / 2**k for k in range(9))

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class PositionMap:
    positions: np.ndarray  # float64, one per token
    delta_per_image: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def max_position(self) -> float:
        return float(self.positions[-1]) if len(self.positions) else 0.0


def parse_delta(text: str | float) -> float:
    """Accept ``1``, ``1/8``, ``0.125`` and return the matching member of the delta set."""
    try:
        value = float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse delta {text!r}") from exc
    if value not in DELTAS:
        raise ConfigError(f"delta {text!r} is not one of {format_deltas()}")
    return value


def format_delta(delta: float) -> str:
    return str(Fraction(delta).limit_denominator(256))


def format_deltas() -> str:
    return ", ".join(format_delta(d) for d in DELTAS)


def compute_positions(
    modality: np.ndarray,
    spans: Sequence[tuple[int, int]],
    deltas: Sequence[float],
) -> PositionMap:
    """Assign p_0 = 0 and p_i = p_{i-1} + (1 if text else delta of its image).

    ``spans`` are the [start, end) ranges of the visual tokens of each image,
    in order; ``deltas`` holds one increment per span.
    """
    modality = np.asarray(modality)
    n = len(modality)
    if len(deltas) != len(spans):
        raise StructuralError(f"{len(spans)} image spans but {len(deltas)} deltas")
    inc = np.ones(n, dtype=np.float64)
    covered = np.zeros(n, dtype=bool)
    for (start, end), delta in zip(spans, deltas):
        if not delta > 0:
            raise ConfigError(f"delta must be positive, got {delta}")
        if not (0 <= start < end <= n) or (modality[start:end] != VISUAL).any():
            raise StructuralError(f"image span [{start}, {end}) does not cover visual tokens")
        if covered[start:end].any():
            raise StructuralError(f"image span [{start}, {end}) overlaps another span")
        covered[start:end] = True
        inc[start:end] = delta
    stray = np.flatnonzero((modality == VISUAL) & ~covered)
    if len(stray):
        raise StructuralError(f"visual token at index {stray[0]} belongs to no image span")
    if n == 0:
        return PositionMap(np.zeros(0), tuple(deltas))
    inc[0] = 0.0
    # add.accumulate is a strict left-to-right running sum, i.e. the recursion itself
    return PositionMap(np.add.accumulate(inc), tuple(float(d) for d in deltas))


def arange_positions(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.float64)


def sample_delta(rng: np.random.Generator, images: int) -> list[float]:
    """Draw one increment per image uniformly from the delta set."""
    if images == 0:
        return []
    idx = rng.integers(0, len(DELTAS), size=images)
    return [DELTAS[i] for i in idx]


def choose_inference_delta(text_tokens: int, visual_tokens: int, context_window: int) -> float:
    """Largest delta whose last position, (text - 1) + visual * delta, stays inside the window."""
    if text_tokens < 0 or visual_tokens < 0 or context_window <= 0:
        raise ConfigError("token counts must be >= 0 and the window > 0")
    for delta in DELTAS:
        if (text_tokens - 1) + visual_tokens * delta < context_window:
            return delta
    needed = (context_window - (text_tokens - 1)) / visual_tokens if visual_tokens else float("inf")
    raise CapacityError(
        f"{text_tokens} text + {visual_tokens} visual tokens exceed window {context_window} "
        f"for every delta; would need delta < {needed:.6g} (smallest allowed {format_delta(DELTAS[-1])})"
    )


def rotary_frequencies(head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    if head_dim % 2:
        raise ConfigError(f"rotary head_dim must be even, got {head_dim}")
    return base ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)


def rotary_phases(positions: np.ndarray, head_dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """angle[i, j] = p_i * base^(-2j / head_dim), in float64."""
    positions = np.asarray(positions, dtype=np.float64)
    return positions[:, None] * rotary_frequencies(head_dim, base)[None, :]


def rotary_tables(positions: np.ndarray, head_dim: int, base: float = ROPE_BASE) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (T, head_dim) for half-split rotation, cast to float32 here."""
    angles = rotary_phases(positions, head_dim, base)
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    return np.concatenate([cos, cos], axis=-1), np.concatenate([sin, sin], axis=-1)
