"""Synthetic corpora, JSONL ingestion, packing and mixture sampling."""

from .jsonl import emit_jsonl, ingest_jsonl
from .mixture import MixtureConfig, sample_mixture
from .packing import PackedBatch, isolation_mask, pack, pack_sequences
from .samples import (
    LANGUAGE,
    MULTIMODAL,
    PreferencePair,
    Sample,
    StepwiseSolution,
    SyntheticImage,
    TokenSequence,
    build_sequence,
    visual_token_count,
)
from .synthetic import (
    ReasoningProblem,
    caption_from_grid,
    evaluate_steps,
    gen_caption_task,
    gen_candidates,
    gen_preference_pairs,
    gen_prm_corpus,
    gen_reasoning_task,
    gen_reverse_task,
    pairs_from_samples,
    parse_solution,
    problem_of,
)

__all__ = [
    "LANGUAGE",
    "MULTIMODAL",
    "MixtureConfig",
    "PackedBatch",
    "PreferencePair",
    "ReasoningProblem",
    "Sample",
    "StepwiseSolution",
    "SyntheticImage",
    "TokenSequence",
    "build_sequence",
    "caption_from_grid",
    "emit_jsonl",
    "evaluate_steps",
    "gen_caption_task",
    "gen_candidates",
    "gen_preference_pairs",
    "gen_prm_corpus",
    "gen_reasoning_task",
    "gen_reverse_task",
    "ingest_jsonl",
    "isolation_mask",
    "pack",
    "pack_sequences",
    "pairs_from_samples",
    "parse_solution",
    "problem_of",
    "sample_mixture",
    "visual_token_count",
]
