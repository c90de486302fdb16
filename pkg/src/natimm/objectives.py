"""Training losses: text-only autoregressive loss with token weighting, and the
mixed preference objective (DPO preference + BCO quality + generation loss).
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data.packing import PackedBatch, pack
from .data.samples import PreferencePair, TokenSequence, build_sequence
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import MultimodalLM
from .tensor import Tensor, no_grad
from .vocab import Vocab

log = logging.getLogger(__name__)


class WeightingScheme(enum.Enum):
    TOKEN = 0.0
    SQUARE = 0.5
    SAMPLE = 1.0

    @classmethod
    def parse(cls, name: str | WeightingScheme) -> WeightingScheme:
        if isinstance(name, cls):
            return name
        aliases = {"token": cls.TOKEN, "square": cls.SQUARE, "sample": cls.SAMPLE}
        try:
            return aliases[str(name).lower().replace("_averaging", "")]
        except KeyError:
            raise ConfigError(f"unknown weighting scheme {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


def token_weights(scheme: WeightingScheme, l: int) -> float:
    """Per-token weight 1 / l**e with e = 0 (token), 0.5 (square) or 1 (sample)."""
    if l < 1:
        raise ContractError(f"weight needs at least one loss token, got l={l}")
    if scheme is WeightingScheme.TOKEN:
        return 1.0
    if scheme is WeightingScheme.SQUARE:
        return 1.0 / math.sqrt(l)
    return 1.0 / l


def row_targets(batch: PackedBatch, scheme: WeightingScheme) -> tuple[np.ndarray, np.ndarray]:
    """Targets and weights per logit row: row i predicts token i+1 of the same sample.

    Rows whose next token is outside the sample or not loss-bearing get weight 0.
    """
    n = len(batch)
    targets = np.zeros(n, dtype=np.int64)
    weights = np.zeros(n, dtype=np.float32)
    if n > 1:
        targets[:-1] = batch.seq.tokens[1:]
        same = batch.sample_ids[1:] == batch.sample_ids[:-1]
        take = same & batch.seq.loss_mask[1:]
        per_sample = np.array([token_weights(scheme, l) if l > 0 else 0.0 for l in batch.loss_counts], dtype=np.float32)
        weights[:-1] = np.where(take, per_sample[batch.sample_ids[1:]], 0.0)
        targets[:-1] = np.where(same, targets[:-1], 0)
    return targets, weights


def batch_logits(model: MultimodalLM, batch: PackedBatch, deltas: Sequence[float] | None = None) -> Tensor:
    return model.forward(batch.seq, batch.positions(deltas).positions, batch.sample_ids)


@dataclass
class LossStats:
    loss_tokens: int = 0
    correct: int = 0
    total_weight: float = 0.0

    @property
    def accuracy(self) -> float:
        return self.correct / self.loss_tokens if self.loss_tokens else float("nan")


def weighted_nll(
    model: MultimodalLM,
    batch: PackedBatch,
    scheme: WeightingScheme,
    deltas: Sequence[float] | None = None,
    stats: LossStats | None = None,
) -> tuple[Tensor, float]:
    """Unnormalized sum of w_i * -log p(x_i | x_<i) over loss tokens, and sum of w_i."""
    logits = batch_logits(model, batch, deltas)
    targets, weights = row_targets(batch, scheme)
    total = T.softmax_cross_entropy(logits, targets, weights, normalize=False)
    if stats is not None:
        live = weights > 0
        stats.loss_tokens += int(live.sum())
        stats.correct += int((logits.data.argmax(axis=-1)[live] == targets[live]).sum())
        stats.total_weight += float(weights.sum())
    return total, float(weights.sum())


def pretrain_loss(
    model: MultimodalLM,
    batch: PackedBatch | Sequence[PackedBatch],
    scheme: WeightingScheme = WeightingScheme.SQUARE,
    deltas: Sequence[Sequence[float]] | Sequence[float] | None = None,
    stats: LossStats | None = None,
) -> Tensor:
    """Weighted text-only loss over one or more packed batches, divided by the total weight.

    ``deltas``: per-image increments, one list per batch when several are given.
    Raises ``DataError`` when no token in the batch bears loss.
    """
    batches = [batch] if isinstance(batch, PackedBatch) else list(batch)
    if deltas is None:
        deltas = [None] * len(batches)
    elif isinstance(batch, PackedBatch):
        deltas = [deltas]
    parts = []
    total_w = 0.0
    for b, d in zip(batches, deltas):
        if sum(b.loss_counts) == 0:
            continue
        s, w = weighted_nll(model, b, scheme, d, stats)
        parts.append(s)
        total_w += w
    if total_w == 0:
        raise DataError("degenerate batch: no loss-bearing tokens")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / total_w)


# -- preference objectives ----------------------------------------------------


def _finite(*values) -> None:
    for v in values:
        arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("non-finite log-probability in preference loss")


def _tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.atleast_1d(np.asarray(x, dtype=np.float32)))


def dpo_loss(policy_chosen, policy_rejected, ref_chosen, ref_rejected, beta: float) -> Tensor:
    """-log sigmoid(beta * (chosen log-ratio - rejected log-ratio)), averaged over pairs."""
    _finite(policy_chosen, policy_rejected, ref_chosen, ref_rejected)
    margin = (_tensor(policy_chosen) - _tensor(ref_chosen)) - (_tensor(policy_rejected) - _tensor(ref_rejected))
    return T.softplus(margin * (-float(beta))).mean()


def bco_loss(
    policy_chosen, policy_rejected, ref_chosen, ref_rejected, beta: float, shift: float
) -> tuple[Tensor, Tensor, Tensor]:
    """Quality loss against the reward shift: (L+, L-, L+ + L-), each averaged over pairs.

    L+ = -log sigmoid(r_c - shift), L- = -log sigmoid(-(r_r - shift)), with
    r = beta * (log pi_theta - log pi_0); the two terms do not interact.
    """
    _finite(policy_chosen, policy_rejected, ref_chosen, ref_rejected, shift)
    beta = float(beta)
    z_c = (_tensor(policy_chosen) - _tensor(ref_chosen)) * beta - float(shift)
    z_r = (_tensor(policy_rejected) - _tensor(ref_rejected)) * beta - float(shift)
    pos = T.softplus(-z_c).mean()
    neg = T.softplus(z_r).mean()
    return pos, neg, pos + neg


@dataclass
class RewardShift:
    """Exponential moving average of the mean reward seen per step."""

    value: float = 0.0
    decay: float = 0.9

    def update(self, chosen_rewards, rejected_rewards) -> float:
        rewards = np.concatenate([np.ravel(chosen_rewards), np.ravel(rejected_rewards)]).astype(np.float64)
        if not np.isfinite(rewards).all():
            raise NumericError("non-finite reward in reward-shift update")
        if rewards.size:
            self.value = self.decay * self.value + (1.0 - self.decay) * float(rewards.mean())
        return self.value


def update_reward_shift(state: RewardShift, chosen_reward, rejected_reward) -> float:
    return state.update(chosen_reward, rejected_reward)


@dataclass
class MPOConfig:
    w_p: float = 0.8
    w_q: float = 0.2
    w_g: float = 1.0
    beta: float = 0.1
    shift_decay: float = 0.9
    scheme: str = "square"

    def __post_init__(self):
        if min(self.w_p, self.w_q, self.w_g) < 0:
            raise ConfigError("MPO term weights must be non-negative")
        if not self.beta > 0:
            raise ConfigError("MPO beta must be positive")
        if not 0 <= self.shift_decay < 1:
            raise ConfigError("reward-shift decay must lie in [0, 1)")


def response_sequence(vocab: Vocab, pair_or_query, response: str, image=None) -> TokenSequence:
    """Query prompt followed by the response; loss mask on response tokens (+ eos)."""
    if isinstance(pair_or_query, PreferencePair):
        image = pair_or_query.image
        pair_or_query = pair_or_query.query
    return build_sequence(vocab, pair_or_query, response, image)


@dataclass
class ResponseScores:
    """Per-sequence log-probabilities plus the generation loss pieces of one forward."""

    logps: Tensor  # (n,) sum of response-token log-probs
    gen_sum: Tensor  # sum of w * -log p over sequences flagged for generation loss
    gen_weight: float


def score_responses(
    model: MultimodalLM,
    seqs: Sequence[TokenSequence],
    scheme: WeightingScheme = WeightingScheme.SQUARE,
    gen_mask: Sequence[bool] | None = None,
    context_window: int | None = None,
    deltas: str | float = 1.0,
) -> ResponseScores:
    """log pi(y|x) for each sequence in one packed pass per window-sized bin."""
    window = context_window or model.cfg.context_window
    gen_mask = list(gen_mask) if gen_mask is not None else [False] * len(seqs)
    bins = pack(seqs, window)
    logps: list[Tensor | None] = [None] * len(seqs)
    gen_parts = []
    gen_weight = 0.0
    for batch in bins:
        d = [1.0 if deltas == "auto" else float(deltas)] * batch.n_images
        logits = batch_logits(model, batch, d)
        targets, weights = row_targets(batch, WeightingScheme.TOKEN)
        lp = T.target_logprobs(logits, targets)
        # indicator[s, t] = 1 where row t predicts a response token of sample s
        indicator = np.zeros((batch.n_samples, len(batch)), dtype=np.float32)
        live = weights > 0
        indicator[batch.sample_ids[live], np.flatnonzero(live)] = 1.0
        sums = (Tensor(indicator) @ lp.reshape(-1, 1)).reshape(-1)
        for i, member in enumerate(batch.members):
            logps[member] = sums[i]
        if any(gen_mask[m] for m in batch.members):
            _, gw = row_targets(batch, scheme)
            keep = np.array([gen_mask[m] for m in batch.members])[batch.sample_ids]
            gw = np.where(keep, gw, 0.0).astype(np.float32)
            if gw.sum() > 0:
                gen_parts.append((lp * Tensor(-gw)).sum())
                gen_weight += float(gw.sum())
    for s, v in zip(seqs, logps):
        if s.loss_count == 0:
            log.warning("empty response: log-probability is 0 by convention")
    out = T.stack([v.reshape(1) for v in logps]).reshape(-1) if logps else Tensor(np.zeros(0, np.float32))
    gen_sum = gen_parts[0] if gen_parts else Tensor(np.zeros((), np.float32))
    for p in gen_parts[1:]:
        gen_sum = gen_sum + p
    return ResponseScores(out, gen_sum, gen_weight)


def sequence_logprob(model: MultimodalLM, seq: TokenSequence, deltas: str | float = 1.0) -> Tensor:
    """log pi(response | query) for one query+response sequence (response = loss-masked tokens)."""
    return score_responses(model, [seq], deltas=deltas).logps.reshape(())


def pair_sequences(vocab: Vocab, pairs: Sequence[PreferencePair]) -> list[TokenSequence]:
    """[chosen_0, rejected_0, chosen_1, rejected_1, ...]"""
    seqs = []
    for p in pairs:
        seqs.append(response_sequence(vocab, p, p.chosen))
        seqs.append(response_sequence(vocab, p, p.rejected))
    return seqs


def reference_logprobs(reference: MultimodalLM, vocab: Vocab, pairs: Sequence[PreferencePair]) -> np.ndarray:
    """(n, 2) frozen-reference log-probs of chosen and rejected responses."""
    with no_grad():
        lp = score_responses(reference, pair_sequences(vocab, pairs)).logps.data
    return lp.reshape(-1, 2).astype(np.float32)


@dataclass
class MPOTerms:
    loss: Tensor
    preference: float
    quality: float
    quality_pos: float
    quality_neg: float
    generation: float
    margin: float  # mean policy log pi(y_c) - log pi(y_r)
    chosen_rewards: np.ndarray = field(repr=False, default=None)
    rejected_rewards: np.ndarray = field(repr=False, default=None)

    def as_dict(self) -> dict:
        return {
            "loss": float(self.loss.item()),
            "L_p": self.preference,
            "L_q": self.quality,
            "L_q_pos": self.quality_pos,
            "L_q_neg": self.quality_neg,
            "L_g": self.generation,
            "margin": self.margin,
        }


def mpo_loss(
    cfg: MPOConfig,
    pairs: Sequence[PreferencePair],
    policy: MultimodalLM,
    vocab: Vocab,
    reference: MultimodalLM | None = None,
    ref_logps: np.ndarray | None = None,
    shift: RewardShift | float = 0.0,
) -> MPOTerms:
    """w_p * L_p + w_q * L_q + w_g * L_g averaged over ``pairs``.

    L_g is the weighted text-only loss on the chosen responses. Reference
    log-probs come from ``ref_logps`` (n, 2) or a frozen ``reference`` model.
    """
    if ref_logps is None:
        if reference is None:
            raise ConfigError("mpo_loss needs a reference model or precomputed reference log-probs")
        ref_logps = reference_logprobs(reference, vocab, pairs)
    ref_logps = np.asarray(ref_logps, dtype=np.float32).reshape(-1, 2)
    shift_value = shift.value if isinstance(shift, RewardShift) else float(shift)
    scheme = WeightingScheme.parse(cfg.scheme)
    seqs = pair_sequences(vocab, pairs)
    scores = score_responses(policy, seqs, scheme, gen_mask=[i % 2 == 0 for i in range(len(seqs))])
    lp = scores.logps.reshape(-1, 2)
    chosen, rejected = lp[:, 0], lp[:, 1]
    ref_c, ref_r = Tensor(ref_logps[:, 0]), Tensor(ref_logps[:, 1])
    l_p = dpo_loss(chosen, rejected, ref_c, ref_r, cfg.beta)
    q_pos, q_neg, l_q = bco_loss(chosen, rejected, ref_c, ref_r, cfg.beta, shift_value)
    if scores.gen_weight > 0:
        l_g = scores.gen_sum * (1.0 / scores.gen_weight)
    else:
        l_g = Tensor(np.zeros((), np.float32))
    total = l_p * float(cfg.w_p) + l_q * float(cfg.w_q) + l_g * float(cfg.w_g)
    lpd = lp.data.astype(np.float64)
    return MPOTerms(
        loss=total,
        preference=float(l_p.item()),
        quality=float(l_q.item()),
        quality_pos=float(q_pos.item()),
        quality_neg=float(q_neg.item()),
        generation=float(l_g.item()),
        margin=float((lpd[:, 0] - lpd[:, 1]).mean()),
        chosen_rewards=cfg.beta * (lpd[:, 0] - ref_logps[:, 0]),
        rejected_rewards=cfg.beta * (lpd[:, 1] - ref_logps[:, 1]),
    )


def preference_margins(model: MultimodalLM, vocab: Vocab, pairs: Sequence[PreferencePair]) -> np.ndarray:
    """Per-pair log pi(y_c|x) - log pi(y_r|x) under ``model``."""
    with no_grad():
        lp = score_responses(model, pair_sequences(vocab, pairs)).logps.data.reshape(-1, 2)
    return (lp[:, 0] - lp[:, 1]).astype(np.float64)
