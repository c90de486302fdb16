from __future__ import annotations

import numpy as np
import pytest

from natimm.model import ModelConfig, MultimodalLM
from natimm.vocab import Vocab

TINY = dict(d_model=16, n_layers=1, n_heads=2, head_dim=8, vit_dim=8, vit_heads=2, projector_hidden=16, mlp_ratio=2)


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


@pytest.fixture(scope="session")
def vocab() -> Vocab:
    return Vocab.default()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model() -> MultimodalLM:
    return MultimodalLM(tiny_config())
