"""Process reward model: step labelling as a multi-turn exchange, and best-of-N.

A solution is laid out as ``[bos] [img] visual... [/img] q s_0 <slot> s_1 <slot> ...``.
Each slot holds ``<+>`` or ``<->``; the slot token is the only loss-bearing
position, so the critic learns to emit the label right after each step. At
scoring time every slot is filled with ``<+>`` and the step score is the
probability of ``<+>`` renormalized over the two label tokens.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data.packing import pack
from .data.samples import StepwiseSolution, TokenSequence, build_sequence
from .data.synthetic import ReasoningProblem, evaluate_steps, parse_step
from .errors import ContractError, StructuralError
from .model import MultimodalLM
from .objectives import WeightingScheme, pretrain_loss
from .optim import Adam, clip_grad_norm
from .positions import TEXT
from .tensor import no_grad
from .vocab import MINUS, PLUS, Vocab

log = logging.getLogger(__name__)


@dataclass
class MultiturnSequence:
    seq: TokenSequence
    slots: np.ndarray  # token index of each answer slot, one per step


def format_multiturn(vocab: Vocab, sol: StepwiseSolution, fill: bool | None = None) -> MultiturnSequence:
    """Lay out ``sol`` with one answer slot after each step.

    Slots carry the solution's labels, or ``<+>`` everywhere when ``fill`` is
    True or the solution is unlabeled.
    """
    if not sol.steps:
        raise StructuralError("cannot format a solution without steps")
    base = build_sequence(vocab, sol.question, "", sol.image, eos=False)
    tokens = list(base.tokens)
    modality = list(base.modality)
    slots = []
    for k, step in enumerate(sol.steps):
        ids = vocab.encode(step)
        if not ids:
            raise StructuralError(f"step {k} is empty")
        tokens += ids
        if fill or sol.labels is None:
            label = PLUS
        else:
            label = PLUS if sol.labels[k] else MINUS
        slots.append(len(tokens))
        tokens.append(label)
        modality += [TEXT] * (len(ids) + 1)
    mask = np.zeros(len(tokens), dtype=bool)
    mask[slots] = True
    seq = TokenSequence(np.array(tokens), np.array(modality), mask, list(base.images), list(base.spans))
    return MultiturnSequence(seq, np.array(slots, dtype=np.int64))


@dataclass
class ParsedTurns:
    turns: list[str]  # turn 0 is "question s_0", later turns one step each
    labels: list[bool]
    n_images: int


def parse_multiturn(vocab: Vocab, tokens: Sequence[int]) -> ParsedTurns:
    """Split a formatted token stream back into turns at the label tokens."""
    tokens = list(tokens)
    n_images = tokens.count(vocab.id("<img>"))
    turns: list[str] = []
    labels: list[bool] = []
    cur: list[int] = []
    skip = {vocab.id("<bos>"), vocab.id("<img>"), vocab.id("</img>"), vocab.id("<img_ctx>")}
    for t in tokens:
        if t in (PLUS, MINUS):
            turns.append(vocab.decode(cur))
            labels.append(t == PLUS)
            cur = []
        elif t not in skip:
            cur.append(t)
    if cur:
        raise StructuralError("trailing tokens after the last answer slot")
    return ParsedTurns(turns, labels, n_images)


@dataclass
class StepScore:
    steps: np.ndarray  # P(+) per step, each in [0, 1]

    @property
    def score(self) -> float:
        return float(np.mean(self.steps))


class Critic(Protocol):
    def score(self, solutions: Sequence[StepwiseSolution]) -> list[StepScore]: ...


def label_probabilities(logits: np.ndarray) -> np.ndarray:
    """P(+) from full-vocab logits rows, renormalized over {+, -}."""
    diff = logits[..., PLUS].astype(np.float64) - logits[..., MINUS].astype(np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * diff))


def _slot_logits(model: MultimodalLM, mts: Sequence[MultiturnSequence], deltas: float) -> list[np.ndarray]:
    """Logit rows predicting each slot, per formatted solution, batched by packing."""
    out: list[np.ndarray | None] = [None] * len(mts)
    with no_grad():
        for batch in pack([m.seq for m in mts], model.cfg.context_window):
            logits = model.forward(batch.seq, batch.positions([deltas] * batch.n_images).positions, batch.sample_ids).data
            for i, member in enumerate(batch.members):
                out[member] = logits[batch.offsets[i] + mts[member].slots - 1]
    return out


@dataclass
class ModelCritic:
    model: MultimodalLM
    vocab: Vocab
    delta: float = 1.0

    def score(self, solutions: Sequence[StepwiseSolution]) -> list[StepScore]:
        mts = [format_multiturn(self.vocab, s, fill=True) for s in solutions]
        return [StepScore(label_probabilities(rows)) for rows in _slot_logits(self.model, mts, self.delta)]

    def predict_labels(self, solutions: Sequence[StepwiseSolution]) -> list[np.ndarray]:
        """Teacher-forced slot predictions (earlier slots carry the true labels)."""
        mts = [format_multiturn(self.vocab, s) for s in solutions]
        return [label_probabilities(rows) > 0.5 for rows in _slot_logits(self.model, mts, self.delta)]


class OracleCritic:
    """Ground-truth arithmetic evaluator: a step scores 1 when it matches the gold chain."""

    def score(self, solutions: Sequence[StepwiseSolution]) -> list[StepScore]:
        out = []
        for s in solutions:
            problem = ReasoningProblem.from_image(s.image, s.question)
            out.append(StepScore(np.array(evaluate_steps(problem, s.steps), dtype=np.float64)))
        return out


def score_solution(critic: Critic, sol: StepwiseSolution) -> StepScore:
    return critic.score([sol])[0]


def slot_accuracy(critic: ModelCritic, corpus: Sequence[StepwiseSolution]) -> float:
    """Fraction of step labels the critic reproduces (teacher-forced)."""
    preds = critic.predict_labels(corpus)
    hits = sum(int((p == np.array(s.labels)).sum()) for p, s in zip(preds, corpus))
    total = sum(len(s.steps) for s in corpus)
    return hits / total if total else float("nan")


@dataclass
class PRMTrainLog:
    losses: list[float] = field(default_factory=list)


def train_prm(
    model: MultimodalLM,
    vocab: Vocab,
    corpus: Sequence[StepwiseSolution],
    steps: int,
    rng: np.random.Generator,
    batch_size: int = 16,
    lr: float = 3e-3,
    scheme: WeightingScheme = WeightingScheme.TOKEN,
    delta: float = 1.0,
    optimizer: Adam | None = None,
    on_step=None,
) -> PRMTrainLog:
    """Fit ``model`` to predict each slot label; loss only on slot tokens."""
    if any(s.labels is None for s in corpus):
        raise ContractError("PRM training needs labels on every solution")
    if not corpus:
        raise ContractError("PRM training corpus is empty")
    seqs = [format_multiturn(vocab, s).seq for s in corpus]
    opt = optimizer or Adam(model.parameters(), lr=lr)
    out = PRMTrainLog()
    for step in range(steps):
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=False)
        batches = pack([seqs[i] for i in idx], model.cfg.context_window)
        opt.zero_grad()
        loss = pretrain_loss(model, batches, scheme, [[delta] * b.n_images for b in batches])
        loss.backward()
        clip_grad_norm(opt.params, 1.0)
        opt.step()
        out.losses.append(float(loss.item()))
        if on_step is not None:
            on_step(step, float(loss.item()))
    return out


@dataclass
class BoNResult:
    candidates: list[StepwiseSolution]
    scores: list[float]
    selected: int
    tie_break: str = "lowest index"

    @property
    def best(self) -> StepwiseSolution:
        return self.candidates[self.selected]


def select_best(scores: Sequence[float]) -> int:
    """Argmax; exact ties go to the lowest index."""
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def best_of_n(critic: Critic, candidates: Sequence[StepwiseSolution], workers: int = 0) -> BoNResult:
    """Score every candidate and keep the highest mean step score.

    With ``workers`` > 0 candidates are scored concurrently; results are
    gathered in candidate order so the outcome never depends on scheduling.
    """
    candidates = list(candidates)
    if not candidates:
        raise ContractError("best-of-N needs at least one candidate")
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(lambda c: critic.score([c])[0], candidates))
    else:
        scored = critic.score(candidates)
    scores = [s.score for s in scored]
    return BoNResult(candidates, scores, select_best(scores))


def final_answer(sol: StepwiseSolution) -> int | None:
    parsed = parse_step(sol.steps[-1])
    return None if parsed is None else parsed[3]


def bon_record(question_id, result: BoNResult, gold: int | None = None) -> dict:
    answer = final_answer(result.best)
    rec = {
        "question_id": question_id,
        "scores": [round(float(s), 6) for s in result.scores],
        "selected": result.selected,
        "answer": "" if answer is None else str(answer),
    }
    if gold is not None:
        rec["correct"] = answer == gold
    return rec


def write_bon_report(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def bon_accuracy_curve(
    critic: Critic,
    problems: Sequence[ReasoningProblem],
    candidate_sets: Sequence[Sequence[StepwiseSolution]],
    ns: Sequence[int] = (1, 2, 4, 8),
) -> dict[int, float]:
    """Final-answer accuracy of BoN over the first N candidates of each set."""
    if not problems:
        return {n: float("nan") for n in ns}
    scores = [[s.score for s in critic.score(cands)] for cands in candidate_sets]
    curve = {}
    for n in ns:
        hits = 0
        for problem, cands, sc in zip(problems, candidate_sets, scores):
            pick = select_best(sc[:n])
            hits += final_answer(cands[pick]) == problem.answer
        curve[n] = hits / len(problems)
    return curve
