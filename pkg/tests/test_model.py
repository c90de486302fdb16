from __future__ import annotations

import numpy as np
import pytest

from natimm.data import pack_sequences
from natimm.data.synthetic import gen_caption_task, gen_reasoning_task, gen_reverse_task
from natimm.errors import CapacityError, ConfigError, DimensionError
from natimm.gradcheck import check_params
from natimm.model import MultimodalLM, generate, pixel_shuffle, pixel_unshuffle, sequence_positions
from natimm.objectives import WeightingScheme, pretrain_loss, sequence_logprob
from natimm.positions import arange_positions, compute_positions
from natimm.tensor import Tensor

from conftest import tiny_config


def test_pixel_unshuffle_quarters_tokens():
    grid = np.random.default_rng(0).normal(size=(1, 32, 32, 3))
    out = pixel_unshuffle(Tensor(grid))
    assert grid.shape[1] * grid.shape[2] == 1024
    assert out.shape == (1, 16, 16, 12) and out.shape[1] * out.shape[2] == 256
    assert np.array_equal(pixel_shuffle(out).data, grid)


def test_pixel_unshuffle_block_order():
    # 2x2 block [[a, b], [c, d]] becomes channels [a, b, c, d]
    grid = np.arange(16.0).reshape(1, 4, 4, 1)
    out = pixel_unshuffle(Tensor(grid)).data
    assert out[0, 0, 0].tolist() == [0, 1, 4, 5]
    assert out[0, 1, 1].tolist() == [10, 11, 14, 15]


def test_pixel_unshuffle_odd_side():
    with pytest.raises(DimensionError):
        pixel_unshuffle(Tensor(np.zeros((3, 4, 1))))


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(d_model=15)
    with pytest.raises(ConfigError):
        tiny_config(patch_grid=(7, 8))


def _seqs(vocab, n=3):
    rng = np.random.default_rng(5)
    samples = gen_caption_task(rng, n) + gen_reverse_task(rng, n)
    return [s.sequence(vocab) for s in samples]


def test_packed_logits_equal_unpacked(vocab, tiny_model):
    seqs = _seqs(vocab)
    batch = pack_sequences(seqs)
    deltas = [0.25] * batch.n_images
    pm = batch.positions(deltas)
    packed = tiny_model(batch.seq, pm.positions, batch.sample_ids).data
    for i, s in enumerate(seqs):
        a, b = batch.offsets[i], batch.offsets[i + 1]
        alone = tiny_model(s, sequence_positions(s, [0.25] * len(s.spans))).data
        np.testing.assert_allclose(packed[a:b], alone, atol=1e-5)


def test_causality(vocab, tiny_model):
    (seq,) = _seqs(vocab, 1)[:1]
    pos = sequence_positions(seq, [1.0])
    full = tiny_model(seq, pos).data
    k = len(seq) - 3
    prefix = tiny_model(seq.prefix(k), pos[:k]).data
    np.testing.assert_allclose(full[:k], prefix, atol=1e-5)


def test_delta_one_is_bit_identical_to_arange(vocab, tiny_model):
    seq = gen_reasoning_task(np.random.default_rng(0), 1)[0].sequence(vocab)
    pos = compute_positions(seq.modality, seq.spans, [1.0]).positions
    a = tiny_model(seq, pos).data
    b = tiny_model(seq, arange_positions(len(seq))).data
    assert a.tobytes() == b.tobytes()


def test_position_beyond_window_is_a_capacity_error(vocab):
    model = MultimodalLM(tiny_config(context_window=20))
    seq = _seqs(vocab, 1)[0]
    with pytest.raises(CapacityError):
        model(seq, arange_positions(len(seq)))
    # shrinking delta brings the same sequence back inside the window
    assert model(seq, sequence_positions(seq, [1 / 16])).shape == (len(seq), 256)


def test_generate_logprobs_match_teacher_forcing(vocab, tiny_model):
    seq = _seqs(vocab, 1)[0]
    prompt = seq.prefix(int(np.flatnonzero(seq.loss_mask)[0]))
    gen = generate(tiny_model, prompt, 5, mode="sample", seed=3, delta=1.0, stop_token=None)
    total = sequence_logprob(tiny_model, gen.seq).item()
    assert abs(total - sum(gen.logprobs)) < 1e-4
    again = generate(tiny_model, prompt, 5, mode="sample", seed=3, delta=1.0, stop_token=None)
    assert again.new_tokens == gen.new_tokens


def test_generate_refuses_overflow(vocab):
    model = MultimodalLM(tiny_config(context_window=24))
    prompt = _seqs(vocab, 1)[0].prefix(19)
    with pytest.raises(CapacityError):
        generate(model, prompt, 10, delta=1.0)


def test_param_groups(tiny_model):
    groups = {tiny_model.param_group(n) for n in tiny_model.parameters()}
    assert groups == {"vision", "projector", "lm"}


def test_full_model_gradcheck(vocab):
    model = MultimodalLM(tiny_config(init_std=0.3))
    model.astype(np.float64)
    seq = gen_caption_task(np.random.default_rng(2), 1)[0].sequence(vocab)
    batch = pack_sequences([seq])
    loss = lambda: pretrain_loss(model, batch, WeightingScheme.SQUARE, [0.5])
    report = check_params(loss, model.parameters(), h=1e-5, rtol=1e-4, atol=1e-7, max_coords=4)
    assert report.ok, report.failures[:3]
