"""Weighted language / multimodal sample stream."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .samples import Sample


@dataclass
class MixtureConfig:
    language_weight: float = 1.0
    multimodal_weight: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.language_weight < 0 or self.multimodal_weight < 0:
            raise ConfigError("mixture weights must be non-negative")
        if self.language_weight == 0 and self.multimodal_weight == 0:
            raise ConfigError("mixture weights cannot both be zero")

    @property
    def multimodal_fraction(self) -> float:
        return self.multimodal_weight / (self.language_weight + self.multimodal_weight)


def sample_mixture(
    cfg: MixtureConfig,
    language_pool: Sequence[Sample],
    multimodal_pool: Sequence[Sample],
    n: int,
    rng: np.random.Generator | None = None,
) -> list[Sample]:
    """n i.i.d. draws: pick the pool by weight, then a member uniformly.

    Without ``rng`` the stream is seeded from ``cfg.seed``; trainers pass their
    own generator so the stream continues across steps.
    """
    if cfg.language_weight > 0 and not language_pool:
        raise ConfigError("language weight is nonzero but the language pool is empty")
    if cfg.multimodal_weight > 0 and not multimodal_pool:
        raise ConfigError("multimodal weight is nonzero but the multimodal pool is empty")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    p_mm = cfg.multimodal_fraction
    out = []
    for _ in range(n):
        pool = multimodal_pool if rng.random() < p_mm else language_pool
        out.append(pool[int(rng.integers(len(pool)))])
    return out
