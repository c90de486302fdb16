from __future__ import annotations

import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from natimm.data import (
    MixtureConfig,
    Sample,
    SyntheticImage,
    TokenSequence,
    build_sequence,
    emit_jsonl,
    ingest_jsonl,
    isolation_mask,
    pack,
    sample_mixture,
)
from natimm.data.packing import first_fit_decreasing
from natimm.data.synthetic import (
    ReasoningProblem,
    caption_from_grid,
    draw_shapes,
    evaluate_steps,
    format_step,
    gen_caption_task,
    gen_preference_pairs,
    gen_prm_corpus,
    gen_reasoning_task,
    gen_reverse_task,
    noisy_solution,
    parse_solution,
    problem_of,
)
from natimm.errors import CapacityError, ConfigError, DataError, IngestionError, StructuralError
from natimm.positions import TEXT, VISUAL, compute_positions
from natimm.vocab import BOS, EOS, IMG_BEGIN, IMG_CTX, IMG_END


# -- sequences -----------------------------------------------------------------


def test_build_sequence_layout(vocab):
    seq = build_sequence(vocab, "caption :", "top_left red dot", SyntheticImage.blank())
    assert seq.tokens[0] == BOS and seq.tokens[1] == IMG_BEGIN and seq.tokens[18] == IMG_END
    assert (seq.tokens[2:18] == IMG_CTX).all() and (seq.modality[2:18] == VISUAL).all()
    assert seq.spans == [(2, 18)]
    assert seq.tokens[-1] == EOS
    # loss on target + eos only
    assert seq.loss_mask.sum() == 4 and seq.loss_mask[-4:].all()
    assert seq.loss_count == 4


def test_visual_token_cannot_carry_loss():
    with pytest.raises(StructuralError):
        TokenSequence(np.array([1, 5]), np.array([TEXT, VISUAL]), np.array([False, True]), [SyntheticImage.blank()], [(1, 2)])


def test_image_validation(vocab):
    with pytest.raises(DataError):
        SyntheticImage(np.full((4, 4), 16))
    with pytest.raises(StructuralError):
        build_sequence(vocab, "caption :", "", SyntheticImage.blank(6, 6))


# -- jsonl -----------------------------------------------------------------------


def test_jsonl_round_trip(tmp_path, vocab):
    rng = np.random.default_rng(0)
    for schema, items in [
        ("pretrain", gen_caption_task(rng, 5) + gen_reverse_task(rng, 5)),
        ("preference", gen_preference_pairs(rng, 5)),
        ("prm", gen_prm_corpus(rng, 5)),
    ]:
        path = tmp_path / f"{schema}.jsonl"
        emit_jsonl(items, path)
        back = ingest_jsonl(path, schema, vocab)
        assert [b.key() for b in back] == [i.key() for i in items]


def test_empty_file_yields_nothing(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert ingest_jsonl(path, "pretrain") == []


@pytest.mark.parametrize(
    "schema,line,field",
    [
        ("pretrain", {"kind": "video", "text": "a"}, "kind"),
        ("pretrain", {"kind": "language", "text": 3}, "text"),
        ("pretrain", {"kind": "multimodal", "text": "caption :", "image": {"h": 16, "w": 16, "grid": [0] * 10}}, "image.grid"),
        ("pretrain", {"kind": "multimodal", "text": "caption :", "image": {"h": 6, "w": 6, "grid": [0] * 36}}, "image.h"),
        ("pretrain", {"kind": "language", "text": "zebra"}, "text"),
        ("preference", {"query": "sum ?", "chosen": "1", "rejected": "1"}, "rejected"),
        ("prm", {"question": "sum ?", "steps": ["1 + 1 = 2"], "labels": ["+", "-"]}, "labels"),
        ("prm", {"question": "sum ?", "steps": []}, "steps"),
    ],
)
def test_ingestion_errors_name_line_and_field(tmp_path, vocab, schema, line, field):
    good = {"pretrain": {"kind": "language", "text": "reverse 1 :", "target": "1"},
            "preference": {"query": "sum ?", "chosen": "1", "rejected": "2"},
            "prm": {"question": "sum ?", "steps": ["1 + 1 = 2"], "labels": ["+"]}}[schema]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(good) + "\n" + json.dumps(line) + "\n")
    with pytest.raises(IngestionError) as info:
        ingest_jsonl(path, schema, vocab)
    assert info.value.line == 2 and info.value.field == field


def test_malformed_json_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"kind": "language"\n')
    with pytest.raises(IngestionError, match="line 1"):
        ingest_jsonl(path, "pretrain")


# -- packing ---------------------------------------------------------------------


def _brute_ffd(lengths, cap):
    """Reference first-fit-decreasing, written independently."""
    bins = []
    for i in sorted(range(len(lengths)), key=lambda i: (-lengths[i], i)):
        for b in bins:
            if sum(lengths[j] for j in b) + lengths[i] <= cap:
                b.append(i)
                break
        else:
            bins.append([i])
    return bins


@settings(max_examples=100, deadline=None)
@given(lengths=st.lists(st.integers(1, 50), min_size=0, max_size=30), cap=st.integers(50, 120))
def test_first_fit_decreasing_matches_reference(lengths, cap):
    bins = first_fit_decreasing(lengths, cap)
    assert bins == _brute_ffd(lengths, cap)
    assert sorted(i for b in bins for i in b) == list(range(len(lengths)))
    assert all(sum(lengths[i] for i in b) <= cap for b in bins)


def test_oversized_sample_is_a_capacity_error():
    with pytest.raises(CapacityError):
        first_fit_decreasing([10, 200], 100)


def test_isolation_mask_matches_loops():
    sid = np.array([0, 0, 1, 1, 1, 2])
    m = isolation_mask(sid)
    for i in range(6):
        for j in range(6):
            assert m[i, j] == (j <= i and sid[i] == sid[j])


def test_packed_positions_restart_per_sample(vocab):
    rng = np.random.default_rng(0)
    samples = gen_caption_task(rng, 3) + gen_reverse_task(rng, 3)
    seqs = [s.sequence(vocab) for s in samples]
    (batch,) = pack(seqs, 512)
    deltas = [0.5] * batch.n_images
    pos = batch.positions(deltas).positions
    for i in range(batch.n_samples):
        a, b = batch.offsets[i], batch.offsets[i + 1]
        seq = seqs[batch.members[i]]
        assert pos[a] == 0
        assert pos[a:b].tolist() == compute_positions(seq.modality, seq.spans, [0.5] * len(seq.spans)).positions.tolist()
        assert batch.part(i).equals(seq)
    assert sum(batch.loss_counts) == sum(s.loss_count for s in seqs)


# -- mixture ---------------------------------------------------------------------


def test_mixture_ratio_and_determinism():
    lang = [Sample("language", "reverse 1 :", "1")]
    mm = [Sample("multimodal", "caption :", "empty", SyntheticImage.blank())]
    cfg = MixtureConfig(1, 3, seed=5)
    a = sample_mixture(cfg, lang, mm, 4000)
    b = sample_mixture(cfg, lang, mm, 4000)
    assert [s.kind for s in a] == [s.kind for s in b]
    frac = Counter(s.kind for s in a)["multimodal"] / 4000
    assert abs(frac - 0.75) < 0.03


def test_mixture_config_errors():
    with pytest.raises(ConfigError):
        MixtureConfig(-1, 1)
    with pytest.raises(ConfigError):
        MixtureConfig(0, 0)
    with pytest.raises(ConfigError):
        sample_mixture(MixtureConfig(1, 3), [], [Sample("multimodal", "caption :", "empty", SyntheticImage.blank())], 3)


def test_zero_weight_pool_is_never_drawn():
    lang = [Sample("language", "reverse 1 :", "1")]
    out = sample_mixture(MixtureConfig(1, 0), lang, [], 100)
    assert all(s.kind == "language" for s in out)


# -- synthetic tasks -------------------------------------------------------------


def test_caption_is_recoverable_from_grid():
    img = draw_shapes([(0, 1, "square"), (3, 5, "cross")])
    assert caption_from_grid(img.grid) == "top_left red square and bottom_right purple cross"
    assert caption_from_grid(SyntheticImage.blank().grid) == "empty"


def test_reasoning_problem_round_trips_through_image():
    for s in gen_reasoning_task(np.random.default_rng(0), 30):
        p = problem_of(s)
        steps, answer = parse_solution(s.target)
        assert answer == p.answer
        assert evaluate_steps(p, steps) == [True] * len(steps)


def test_worked_reasoning_example():
    p = ReasoningProblem((3, 4), "sum then double ?")
    assert [format_step(s) for s in p.gold_steps()] == ["3 + 4 = 7", "7 * 2 = 14"]
    assert p.answer == 14


def test_noisy_solution_labels_match_an_independent_check():
    rng = np.random.default_rng(1)
    for sol in gen_prm_corpus(rng, 50):
        p = ReasoningProblem.from_image(sol.image, sol.question)
        for step, label in zip(sol.steps, sol.labels):
            a, op, b, _, c = step.split()[0], step.split()[1], step.split()[2], None, int(step.split()[4])
            truth = {"+": int(a) + int(b), "-": int(a) - int(b), "*": int(a) * int(b)}[op]
            assert label == (c == truth)
        assert len(sol.steps) == len(p.gold_steps())


def test_forced_error_always_corrupts():
    rng = np.random.default_rng(2)
    p = ReasoningProblem((1, 2, 3), "product then add ?")
    for _ in range(20):
        assert not all(noisy_solution(p, rng, 0.0, force_error=True).labels)
