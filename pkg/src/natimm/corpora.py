"""A complete synthetic corpus bundle plus per-stage configs, for the CLI walkthrough."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .data.jsonl import emit_jsonl
from .data.samples import PreferencePair, Sample, StepwiseSolution
from .data.synthetic import (
    gen_candidates,
    gen_caption_task,
    gen_preference_pairs,
    gen_prm_corpus,
    gen_reasoning_task,
    gen_reverse_task,
    pairs_from_samples,
    problem_of,
)
from .vocab import Vocab


@dataclass
class Bundle:
    pretrain: list[Sample]
    sft: list[Sample]
    preference: list[PreferencePair]
    heldout: list[PreferencePair]
    eval: list[Sample]
    prm: list[StepwiseSolution]
    candidates: list[StepwiseSolution]


def make_bundle(seed: int = 0, captions: int = 64, texts: int = 64, questions: int = 256, bon_questions: int = 200, n: int = 8) -> Bundle:
    rng = np.random.default_rng(seed)
    cap = gen_caption_task(rng, captions)
    rev = gen_reverse_task(rng, texts)
    reasoning = gen_reasoning_task(rng, questions)
    pairs = pairs_from_samples(reasoning, rng)
    heldout = gen_preference_pairs(rng, 100)
    prm = gen_prm_corpus(rng, questions)
    bon_problems = [problem_of(s) for s in gen_reasoning_task(rng, bon_questions)]
    candidates = [c for p in bon_problems for c in gen_candidates(p, rng, n)]
    evalset = cap[: captions // 2] + rev[: texts // 2] + reasoning[:64]
    return Bundle(cap + rev, reasoning + rev, pairs, heldout, evalset, prm, candidates)


STAGE_CONFIGS = {
    "pretrain": {"stage": "pretrain", "steps": 2000, "data": {"train": "pretrain.jsonl"}},
    "sft": {"stage": "sft", "steps": 1000, "data": {"train": "sft.jsonl"}, "paths": {"ckpt_in": "runs/pretrain.nimm"}},
    "mpo": {
        "stage": "mpo",
        "steps": 500,
        "batch_size": 8,
        "optim": {"lr": 1e-5},
        "data": {"preference": "preference.jsonl", "heldout": "heldout.jsonl"},
        "paths": {"ckpt_in": "runs/sft.nimm"},
    },
    "prm": {"stage": "prm", "steps": 1600, "weighting": "token", "data": {"prm": "prm.jsonl"}},
    "bon": {"stage": "bon", "data": {"candidates": "candidates.jsonl"}, "paths": {"critic": "runs/prm.nimm"}},
    "eval": {
        "stage": "eval",
        "data": {"eval": "eval.jsonl", "heldout": "heldout.jsonl"},
        "paths": {"ckpt_in": "runs/mpo.nimm"},
        "eval": {"delta_sweep": True},
    },
}


def write_bundle(out: str | Path, seed: int = 0) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    b = make_bundle(seed)
    written = []
    Vocab.default().save(out / "vocab.txt")
    written.append(out / "vocab.txt")
    for name in ("pretrain", "sft", "preference", "heldout", "eval", "prm", "candidates"):
        path = out / f"{name}.jsonl"
        emit_jsonl(getattr(b, name), path)
        written.append(path)
    for stage, cfg in STAGE_CONFIGS.items():
        cfg = {"seed": seed, **cfg}
        cfg.setdefault("paths", {})
        cfg["paths"] = {"vocab": "vocab.txt", "out_dir": "runs", **cfg["paths"]}
        path = out / f"{stage}.yaml"
        path.write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
        written.append(path)
    return written
