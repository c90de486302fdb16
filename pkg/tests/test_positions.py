from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from natimm.errors import CapacityError, ConfigError, StructuralError
from natimm.positions import (
    DELTAS,
    TEXT,
    VISUAL,
    arange_positions,
    choose_inference_delta,
    compute_positions,
    format_delta,
    parse_delta,
    rotary_phases,
    rotary_tables,
    sample_delta,
)


def scalar_positions(modality, spans, deltas):
    """Reference recursion, one token at a time."""
    inc_of = {}
    for (a, b), d in zip(spans, deltas):
        for i in range(a, b):
            inc_of[i] = d
    out = []
    p = 0.0
    for i in range(len(modality)):
        if i > 0:
            p = p + (inc_of[i] if modality[i] == VISUAL else 1.0)
        out.append(p)
    return out


def random_layout(rng, max_images=3):
    modality, spans = [TEXT] * int(rng.integers(1, 5)), []
    for _ in range(int(rng.integers(0, max_images + 1))):
        n = int(rng.integers(1, 20))
        spans.append((len(modality), len(modality) + n))
        modality += [VISUAL] * n + [TEXT] * int(rng.integers(0, 4))
    return np.array(modality), spans


@pytest.mark.parametrize("delta", DELTAS)
def test_matches_scalar_recursion(delta):
    rng = np.random.default_rng(int(1 / delta))
    for _ in range(50):
        modality, spans = random_layout(rng)
        deltas = [delta] * len(spans)
        got = compute_positions(modality, spans, deltas).positions
        assert got.tolist() == scalar_positions(modality, spans, deltas)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_mixed_deltas_per_image(seed):
    rng = np.random.default_rng(seed)
    modality, spans = random_layout(rng, 4)
    deltas = sample_delta(rng, len(spans))
    got = compute_positions(modality, spans, deltas)
    assert got.positions.tolist() == scalar_positions(modality, spans, deltas)
    assert np.all(np.diff(got.positions) > 0)


def test_delta_one_is_arange():
    rng = np.random.default_rng(0)
    modality, spans = random_layout(rng)
    got = compute_positions(modality, spans, [1.0] * len(spans)).positions
    assert np.array_equal(got, arange_positions(len(modality)))


def test_worked_example():
    # bos, img, 4 visual, /img, 2 text at delta 1/4
    modality = np.array([TEXT, TEXT] + [VISUAL] * 4 + [TEXT] * 3)
    got = compute_positions(modality, [(2, 6)], [0.25]).positions
    assert got.tolist() == [0, 1, 1.25, 1.5, 1.75, 2.0, 3.0, 4.0, 5.0]


def test_structural_errors():
    modality = np.array([TEXT, VISUAL, VISUAL, TEXT])
    with pytest.raises(StructuralError):
        compute_positions(modality, [], [])
    with pytest.raises(StructuralError):
        compute_positions(modality, [(1, 3), (2, 3)], [1.0, 1.0])
    with pytest.raises(StructuralError):
        compute_positions(modality, [(0, 2)], [1.0])
    with pytest.raises(StructuralError):
        compute_positions(modality, [(1, 3)], [])


def test_choose_inference_delta():
    assert choose_inference_delta(10, 16, 512) == 1.0
    # 99 + 1024 * d < 512 first holds at d = 1/4
    assert choose_inference_delta(100, 1024, 512) == 0.25
    with pytest.raises(CapacityError, match="would need delta"):
        choose_inference_delta(100, 200_000, 512)
    with pytest.raises(CapacityError):
        choose_inference_delta(600, 0, 512)


def test_parse_and_format_delta():
    for d in DELTAS:
        assert parse_delta(format_delta(d)) == d
    assert parse_delta("0.125") == 0.125
    with pytest.raises(ConfigError):
        parse_delta("3/4")
    with pytest.raises(ConfigError):
        parse_delta("abc")


def test_rotary_phases_formula():
    pos = np.array([0.0, 0.5, 3.0])
    got = rotary_phases(pos, 8)
    want = np.array([[p * 10000.0 ** (-2 * j / 8) for j in range(4)] for p in pos])
    np.testing.assert_allclose(got, want, rtol=1e-15)
    with pytest.raises(ConfigError):
        rotary_phases(pos, 7)


@pytest.mark.parametrize("shift", [0.0, 0.375, 5.0, 11.0625])
def test_rotary_scores_depend_only_on_offset(shift):
    rng = np.random.default_rng(3)
    q, k = rng.normal(size=(2, 16))
    base = np.array([1.5, 4.0])

    def score(p):
        cos, sin = rotary_tables(p, 16)
        rot = lambda x, i: x * cos[i] + np.concatenate([-x[8:], x[:8]]) * sin[i]
        return rot(q, 0) @ rot(k, 1)

    assert abs(score(base) - score(base + shift)) < 1e-4
