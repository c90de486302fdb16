from __future__ import annotations

import json

import numpy as np
import pytest

from natimm.checkpoint import Checkpoint
from natimm.config import RunConfig
from natimm.data.synthetic import gen_caption_task, gen_preference_pairs, gen_prm_corpus, gen_reasoning_task, gen_reverse_task
from natimm.errors import ConfigError, DataError
from natimm.model import MultimodalLM
from natimm.trainer import (
    GROUPS,
    delta_sweep,
    evaluate_samples,
    model_from_checkpoint,
    reasoning_correct,
    run_eval,
    run_mpo,
    run_pretrain,
    run_prm,
    run_sft,
)

from natimm.vocab import Vocab

from conftest import TINY

RNG = np.random.default_rng(21)
CAPTIONS = gen_caption_task(RNG, 6)
REVERSE = gen_reverse_task(RNG, 6)
REASONING = gen_reasoning_task(RNG, 6)
PAIRS = gen_preference_pairs(RNG, 6)
PRM = gen_prm_corpus(RNG, 6)


def cfg(tmp_path, **kw) -> RunConfig:
    raw = {"steps": 4, "batch_size": 4, "model": dict(TINY), "paths": {"out_dir": str(tmp_path)}, "optim": {"warmup": 2}}
    for k, v in kw.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k] = {**raw[k], **v}
        else:
            raw[k] = v
    return RunConfig.from_dict(raw)


def test_zero_steps_saves_the_initialization(tmp_path):
    c = cfg(tmp_path, steps=0, seed=5)
    res = run_pretrain(c, CAPTIONS + REVERSE)
    init = MultimodalLM(c.model.__class__(**{**c.model.to_dict(), "seed": 5}))
    loaded = model_from_checkpoint(Checkpoint.load(tmp_path / "pretrain.nimm"))
    for k, v in init.state_dict().items():
        assert np.array_equal(loaded.state_dict()[k], v)
    assert res.metrics == [] and (tmp_path / "pretrain.metrics.jsonl").read_text() == ""


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pretrain(cfg(a), CAPTIONS + REVERSE)
    run_pretrain(cfg(b), CAPTIONS + REVERSE)
    assert (a / "pretrain.nimm").read_bytes() == (b / "pretrain.nimm").read_bytes()
    assert (a / "pretrain.metrics.jsonl").read_bytes() == (b / "pretrain.metrics.jsonl").read_bytes()
    run_pretrain(cfg(b, seed=1), CAPTIONS + REVERSE)
    assert (a / "pretrain.nimm").read_bytes() != (b / "pretrain.nimm").read_bytes()


def test_checkpoint_records_provenance_and_data(tmp_path):
    run_pretrain(cfg(tmp_path), CAPTIONS + REVERSE)
    ck = Checkpoint.load(tmp_path / "pretrain.nimm")
    assert ck.config["stage"] == "pretrain" and ck.config["step"] == 4
    assert set(ck.config["data"]) == {"train"}
    assert ck.config["run"]["seed"] == 0 and "paths" not in ck.config["run"]
    run_sft(cfg(tmp_path / "s", stage="sft", paths={"ckpt_in": str(tmp_path / "pretrain.nimm")}), REASONING + REVERSE)
    assert Checkpoint.load(tmp_path / "s" / "sft.nimm").config["provenance"] == ["pretrain@4"]


def _interrupt_after(monkeypatch, at: int):
    """Make the periodic save at step ``at`` the last thing the process does."""
    original = Checkpoint.save

    def save(self, path):
        original(self, path)
        if self.config["step"] == at:
            raise KeyboardInterrupt

    monkeypatch.setattr(Checkpoint, "save", save)


@pytest.mark.parametrize(
    "stage,runner,data,at",
    [
        ("pretrain", run_pretrain, CAPTIONS + REVERSE, 1),
        ("pretrain", run_pretrain, CAPTIONS + REVERSE, 4),
        ("mpo", run_mpo, PAIRS, 3),
        ("prm", run_prm, PRM, 2),
    ],
)
def test_resume_is_bit_equivalent(tmp_path, monkeypatch, stage, runner, data, at):
    start = {}
    if stage == "mpo":
        run_sft(cfg(tmp_path / "p", stage="sft", steps=2, force=True), REASONING + REVERSE)
        start = {"ckpt_in": str(tmp_path / "p" / "sft.nimm")}
    full, part = tmp_path / "full", tmp_path / "part"
    runner(cfg(full, stage=stage, steps=6, paths=start), data)

    with monkeypatch.context() as m:
        _interrupt_after(m, at)
        with pytest.raises(KeyboardInterrupt):
            runner(cfg(part, stage=stage, steps=6, checkpoint_every=1, paths=start), data)
    assert (part / f"{stage}.metrics.jsonl").read_text().count("\n") == at
    runner(cfg(part, stage=stage, steps=6, paths={"ckpt_in": str(part / f"{stage}.nimm")}), data)

    assert (full / f"{stage}.nimm").read_bytes() == (part / f"{stage}.nimm").read_bytes()
    assert (full / f"{stage}.metrics.jsonl").read_bytes() == (part / f"{stage}.metrics.jsonl").read_bytes()


def test_resume_past_the_end_is_refused(tmp_path):
    run_pretrain(cfg(tmp_path, steps=4), CAPTIONS + REVERSE)
    with pytest.raises(ConfigError):
        run_pretrain(cfg(tmp_path, steps=2, paths={"ckpt_in": str(tmp_path / "pretrain.nimm")}), CAPTIONS + REVERSE)


def test_stage_order(tmp_path):
    run_pretrain(cfg(tmp_path, steps=1), CAPTIONS + REVERSE)
    pre = str(tmp_path / "pretrain.nimm")
    with pytest.raises(ConfigError, match="force"):
        run_mpo(cfg(tmp_path / "m", stage="mpo", steps=1, paths={"ckpt_in": pre}), PAIRS)
    with pytest.raises(ConfigError):
        run_sft(cfg(tmp_path / "s", stage="sft", steps=1), REASONING)
    res = run_mpo(cfg(tmp_path / "m", stage="mpo", steps=1, force=True, paths={"ckpt_in": pre}), PAIRS)
    assert res.checkpoint.config["provenance"] == ["pretrain@1"]
    with pytest.raises(DataError):
        run_sft(cfg(tmp_path / "s", stage="sft", paths={"ckpt_in": str(tmp_path / "missing.nimm")}), REASONING)


def test_every_parameter_group_learns(tmp_path):
    res = run_pretrain(cfg(tmp_path, steps=2), CAPTIONS + REVERSE, write=False)
    assert set(res.summary["grad_totals"]) == set(GROUPS)
    assert all(v > 0 for v in res.summary["grad_totals"].values())
    assert all(set(m["grad_norm"]) == set(GROUPS) for m in res.metrics)


def test_mpo_metrics_carry_the_terms(tmp_path):
    run_sft(cfg(tmp_path, stage="sft", steps=1, force=True), REASONING + REVERSE)
    res = run_mpo(cfg(tmp_path, stage="mpo", steps=3, paths={"ckpt_in": str(tmp_path / "sft.nimm")}), PAIRS, PAIRS[:3])
    first = res.metrics[0]
    for key in ("loss", "L_p", "L_q", "L_q_pos", "L_q_neg", "L_g", "margin", "shift"):
        assert key in first
    assert first["shift"] == 0.0 and abs(first["L_p"] - np.log(2)) < 1e-6
    assert "heldout_margin_before" in res.summary and "heldout_margin_after" in res.summary
    logged = [json.loads(l) for l in (tmp_path / "mpo.metrics.jsonl").read_text().splitlines()]
    # policy == reference at step 1, so every reward and the step-2 shift are 0
    assert logged[1]["shift"] == 0.0
    assert logged[2]["shift"] == res.metrics[2]["shift"] != 0.0


def test_eval_on_empty_set(tmp_path):
    run_pretrain(cfg(tmp_path, steps=0), CAPTIONS + REVERSE)
    report = run_eval(cfg(tmp_path, stage="eval", paths={"ckpt_in": str(tmp_path / "pretrain.nimm")}), [])
    assert report["samples"] == 0
    assert json.loads((tmp_path / "eval.json").read_text())["samples"] == 0


def test_eval_requires_a_checkpoint(tmp_path):
    with pytest.raises(DataError):
        run_eval(cfg(tmp_path, stage="eval", paths={"ckpt_in": str(tmp_path / "none.nimm")}), [])


def test_gold_transcripts_score_perfectly():
    for s in REASONING:
        assert reasoning_correct(s, s.target)
        assert not reasoning_correct(s, s.target.rsplit(" ", 1)[0] + " 99")


def test_caption_exact_match_of_a_memorized_model(tmp_path):
    res = run_pretrain(cfg(tmp_path, steps=150, mixture={"language_weight": 0.0}, optim={"lr": 1e-2}), CAPTIONS[:2], write=False)
    report = evaluate_samples(res.model, Vocab.default(), CAPTIONS[:2], max_new=12)
    assert report["per_task"]["caption"]["samples"] == 2
    assert report["caption_exact_match"] == 1.0


def test_delta_sweep_baseline_row(vocab, tiny_model):
    rows = delta_sweep(tiny_model, vocab, CAPTIONS[:3] + REVERSE[:2])
    assert [r["delta"] for r in rows][:2] == ["baseline", "1"]
    assert len(rows) == 10
    assert rows[0] == {**rows[1], "delta": "baseline"}
