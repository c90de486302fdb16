"""Stage orchestration: pretrain -> sft -> mpo, critic training, best-of-N, eval.

Every stage is a pure function of (config, data, input checkpoint). All
randomness flows from one generator seeded by the run seed, and its state is
checkpointed, so a run resumed from step k reproduces the uninterrupted run
bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, lr_at
from .data.jsonl import ingest_jsonl, to_record
from .data.mixture import sample_mixture
from .data.packing import PackedBatch, pack
from .data.samples import LANGUAGE, MULTIMODAL, PreferencePair, Sample, StepwiseSolution, build_sequence
from .data.synthetic import CAPTION_PROMPT, TEMPLATES, ReasoningProblem, parse_solution
from .errors import ConfigError, DataError, NumericError
from .model import ModelConfig, MultimodalLM, generate, inference_deltas
from .objectives import (
    LossStats,
    RewardShift,
    WeightingScheme,
    mpo_loss,
    preference_margins,
    pretrain_loss,
    reference_logprobs,
    row_targets,
)
from .optim import Adam, Optimizer, OptimizerState, SGD, clip_grad_norm
from .positions import DELTAS, choose_inference_delta, format_delta, parse_delta, sample_delta
from .prm import ModelCritic, OracleCritic, best_of_n, bon_accuracy_curve, bon_record, format_multiturn, slot_accuracy, write_bon_report
from .tensor import Tensor, no_grad
from .vocab import Vocab

log = logging.getLogger(__name__)

FORMAT = "natimm-checkpoint"
# stage -> stages whose checkpoints it may start from
ORDER = {"pretrain": (), "sft": ("pretrain",), "mpo": ("sft",), "prm": ("pretrain", "sft", "mpo")}
GROUPS = ("vision", "projector", "lm")


# -- state ---------------------------------------------------------------------


@dataclass
class TrainState:
    model: MultimodalLM
    optimizer: Optimizer
    rng: np.random.Generator
    stage: str
    step: int = 0
    provenance: list[str] = field(default_factory=list)
    shift: RewardShift | None = None
    reference: MultimodalLM | None = None
    vocab: Vocab = field(default_factory=Vocab.default)
    data_digest: dict = field(default_factory=dict)
    grad_totals: dict = field(default_factory=dict)  # summed per-group gradient norms this session


@dataclass
class RunResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    summary: dict
    model: MultimodalLM | None = None
    path: Path | None = None


def make_optimizer(model: MultimodalLM, cfg: RunConfig, state: OptimizerState | None = None) -> Optimizer:
    o = cfg.optim
    if o.kind == "sgd":
        opt = SGD(model.parameters(), lr=o.lr, weight_decay=o.weight_decay)
        if state is not None:
            opt.state.step, opt.state.skipped = state.step, state.skipped
        return opt
    return Adam(model.parameters(), lr=o.lr, betas=o.betas, eps=o.eps, weight_decay=o.weight_decay, state=state)


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise DataError(f"unsupported rng {state.get('bit_generator')!r} in checkpoint")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def to_checkpoint(cfg: RunConfig, st: TrainState) -> Checkpoint:
    opt = st.optimizer.state
    config = {
        "format": FORMAT,
        "stage": st.stage,
        "provenance": list(st.provenance),
        "step": st.step,
        "model": st.model.cfg.to_dict(),
        "run": cfg.snapshot(),
        "data": dict(st.data_digest),
        "rng": rng_state(st.rng),
        "optimizer": opt.hyperparameters(),
        "mpo_shift": None if st.shift is None else {"value": st.shift.value, "decay": st.shift.decay},
        "vocab": list(st.vocab.tokens),
    }
    tensors = {f"param.{k}": v for k, v in st.model.state_dict().items()}
    for k in st.model.parameters():
        if k in opt.m:
            tensors[f"optim.m.{k}"] = opt.m[k]
            tensors[f"optim.v.{k}"] = opt.v[k]
    if st.reference is not None:
        tensors.update({f"ref.{k}": v for k, v in st.reference.state_dict().items()})
    return Checkpoint(config, tensors)


def model_from_checkpoint(ck: Checkpoint, prefix: str = "param") -> MultimodalLM:
    if ck.config.get("format") != FORMAT:
        raise DataError("checkpoint was not written by this trainer")
    model = MultimodalLM(ModelConfig(**ck.config["model"]))
    params = ck.group(prefix)
    missing = set(model.parameters()) - set(params)
    if missing:
        raise DataError(f"checkpoint lacks tensors: {', '.join(sorted(missing)[:5])}")
    model.load_state_dict(params)
    return model


def vocab_from_checkpoint(ck: Checkpoint) -> Vocab:
    tokens = ck.config.get("vocab")
    return Vocab(tokens) if tokens else Vocab.default()


def load_checkpoint(path: str | Path | None, what: str = "checkpoint") -> Checkpoint:
    if not path:
        raise ConfigError(f"this stage needs an input {what} (paths.ckpt_in / --ckpt)")
    if not Path(path).exists():
        raise DataError(f"{what} {path} does not exist")
    return Checkpoint.load(path)


def load_vocab(cfg: RunConfig) -> Vocab:
    return Vocab.load(cfg.paths.vocab) if cfg.paths.vocab else Vocab.default()


def corpus_digest(items: Sequence) -> str:
    """Digest of the canonical JSONL bytes of ``items`` (matches files written by emit_jsonl)."""
    h = hashlib.blake2b(digest_size=8)
    for it in items:
        h.update((json.dumps(to_record(it), separators=(",", ":")) + "\n").encode("utf-8"))
    return h.hexdigest()


def init_state(cfg: RunConfig, vocab: Vocab) -> TrainState:
    """Fresh stage state, or a resumed one when the input checkpoint is from this stage."""
    stage = cfg.stage
    allowed = ORDER.get(stage, ())
    ck = None
    if cfg.paths.ckpt_in:
        ck = load_checkpoint(cfg.paths.ckpt_in)
    elif allowed and stage != "prm" and not cfg.force:
        raise ConfigError(f"stage {stage} needs a checkpoint from stage {' or '.join(allowed)} (--ckpt)")
    if ck is None:
        model = MultimodalLM(dataclasses.replace(cfg.model, seed=cfg.seed, vocab_size=len(vocab)))
        return TrainState(model, make_optimizer(model, cfg), np.random.default_rng(cfg.seed), stage, vocab=vocab)
    src = ck.config.get("stage")
    model = model_from_checkpoint(ck)
    vocab = vocab_from_checkpoint(ck)
    provenance = list(ck.config.get("provenance", []))
    if src == stage:
        if ck.config["run"] != cfg.snapshot() | {"steps": ck.config["run"]["steps"]}:
            log.warning("resuming with a configuration that differs from the checkpoint's")
        opt_cfg = ck.config["optimizer"]
        state = OptimizerState(
            kind=opt_cfg["kind"],
            lr=cfg.optim.lr,
            betas=tuple(cfg.optim.betas),
            eps=cfg.optim.eps,
            weight_decay=cfg.optim.weight_decay,
            step=opt_cfg["step"],
            skipped=opt_cfg["skipped"],
            m={k: v.copy() for k, v in ck.group("optim.m").items()},
            v={k: v.copy() for k, v in ck.group("optim.v").items()},
        )
        st = TrainState(model, make_optimizer(model, cfg, state), restore_rng(ck.config["rng"]), stage, ck.config["step"], provenance, vocab=vocab)
        if ck.config.get("mpo_shift"):
            st.shift = RewardShift(**ck.config["mpo_shift"])
        if ck.group("ref"):
            st.reference = model_from_checkpoint(ck, "ref")
        if st.step > cfg.steps:
            raise ConfigError(f"checkpoint is at step {st.step}, beyond the requested {cfg.steps} steps")
        return st
    if src not in allowed and not cfg.force:
        raise ConfigError(
            f"stage {stage} expects a checkpoint from {' or '.join(allowed) or 'no earlier stage'}, "
            f"got {src!r}; pass --force to override"
        )
    provenance.append(f"{src}@{ck.config['step']}")
    return TrainState(model, make_optimizer(model, cfg), np.random.default_rng(cfg.seed), stage, 0, provenance, vocab=vocab)


# -- the loop --------------------------------------------------------------------


def group_grad_norms(model: MultimodalLM) -> dict[str, float]:
    sq = {g: 0.0 for g in GROUPS}
    for name, p in model.named_parameters():
        if p.grad is not None:
            g = p.grad.astype(np.float64).ravel()
            sq[model.param_group(name)] += float(np.dot(g, g))
    return {g: math.sqrt(v) for g, v in sq.items()}


class MetricsLog:
    """One JSON object per line; a resumed run keeps the lines up to its start step."""

    def __init__(self, path: Path | None, resume_step: int):
        self.path = path
        self.lines: list[dict] = []
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume_step > 0 and path.exists():
            for raw in path.read_text(encoding="utf-8").splitlines():
                if raw.strip() and json.loads(raw).get("step", 0) <= resume_step:
                    kept.append(raw + "\n")
        path.write_text("".join(kept), encoding="utf-8")

    def write(self, rec: dict) -> None:
        self.lines.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


StepFn = Callable[[TrainState], tuple[Tensor, dict]]


def train_loop(cfg: RunConfig, st: TrainState, step_fn: StepFn, out_dir: Path | None, ckpt_path: Path | None) -> list[dict]:
    metrics = MetricsLog(out_dir / f"{cfg.stage}.metrics.jsonl" if out_dir else None, st.step)
    cumulative = dict(st.grad_totals) or {g: 0.0 for g in GROUPS}
    while st.step < cfg.steps:
        st.optimizer.zero_grad()
        st.optimizer.state.lr = lr_at(cfg.optim, st.step, cfg.steps)
        loss, extra = step_fn(st)
        value = float(loss.item())
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {st.step + 1}")
        loss.backward()
        norms = group_grad_norms(st.model)
        for g in GROUPS:
            cumulative[g] += norms[g]
        if cfg.optim.clip > 0:
            clip_grad_norm(st.optimizer.params, cfg.optim.clip)
        if not st.optimizer.step():
            raise NumericError(f"non-finite gradient at step {st.step + 1}")
        st.step += 1
        if cfg.log_every and st.step % cfg.log_every == 0:
            metrics.write({"stage": cfg.stage, "step": st.step, "loss": value, **extra, "grad_norm": norms})
        if ckpt_path is not None and cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0 and st.step < cfg.steps:
            to_checkpoint(cfg, st).save(ckpt_path)
    st.grad_totals = cumulative
    return metrics.lines


def stage_deltas(cfg: RunConfig, batch: PackedBatch, rng: np.random.Generator) -> list[float]:
    """Per-image increments for a training batch under the run's delta policy."""
    if cfg.delta == "sample":
        return sample_delta(rng, batch.n_images)
    if cfg.delta == "auto":
        out = []
        for i in range(batch.n_samples):
            part = batch.part(i)
            if part.spans:
                d = choose_inference_delta(part.text_count, part.visual_count, cfg.model.context_window)
                out += [d] * len(part.spans)
        return out
    return [parse_delta(cfg.delta)] * batch.n_images


def eval_delta(cfg: RunConfig) -> str | float:
    return "auto" if cfg.delta in ("sample", "auto") else parse_delta(cfg.delta)


def _finish(cfg: RunConfig, st: TrainState, metrics: list[dict], summary: dict, ckpt_path: Path | None) -> RunResult:
    ck = to_checkpoint(cfg, st)
    if ckpt_path is not None:
        ck.save(ckpt_path)
    return RunResult(ck, metrics, summary, st.model, ckpt_path)


def _outputs(cfg: RunConfig, write: bool) -> tuple[Path | None, Path | None]:
    if not write:
        return None, None
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.paths.ckpt_out) if cfg.paths.ckpt_out else out_dir / f"{cfg.stage}.nimm"
    return out_dir, ckpt


# -- pretrain / sft ---------------------------------------------------------------


def load_samples(path: str | None, vocab: Vocab, what: str) -> list[Sample]:
    if not path:
        raise ConfigError(f"no {what} corpus configured")
    return ingest_jsonl(path, "pretrain", vocab)


def split_pools(samples: Sequence[Sample]) -> tuple[list[Sample], list[Sample]]:
    return [s for s in samples if s.kind == LANGUAGE], [s for s in samples if s.kind == MULTIMODAL]


def run_pretrain(cfg: RunConfig, samples: Sequence[Sample] | None = None, write: bool = True) -> RunResult:
    """Joint training of every parameter on a language/multimodal mixture.

    SFT is the same procedure on instruction data (prompt tokens carry no loss).
    """
    vocab = load_vocab(cfg)
    if samples is None:
        samples = load_samples(cfg.data.train, vocab, "training")
    st = init_state(cfg, vocab)
    vocab = st.vocab
    language, multimodal = split_pools(samples)
    if cfg.mixture.language_weight > 0 and not language or cfg.mixture.multimodal_weight > 0 and not multimodal:
        raise ConfigError(
            f"mixture weights need both pools; got {len(language)} language and {len(multimodal)} multimodal samples"
        )
    st.data_digest = {"train": corpus_digest(samples)}
    window = st.model.cfg.context_window
    scheme = cfg.scheme

    def step_fn(st: TrainState):
        draw = sample_mixture(cfg.mixture, language, multimodal, cfg.batch_size, st.rng)
        batches = pack([s.sequence(vocab) for s in draw], window)
        deltas = [stage_deltas(cfg, b, st.rng) for b in batches]
        stats = LossStats()
        loss = pretrain_loss(st.model, batches, scheme, deltas, stats)
        n_mm = sum(s.kind == MULTIMODAL for s in draw)
        return loss, {"accuracy": stats.accuracy, "loss_tokens": stats.loss_tokens, "multimodal": n_mm}

    out_dir, ckpt = _outputs(cfg, write)
    metrics = train_loop(cfg, st, step_fn, out_dir, ckpt)
    with no_grad():
        acc = loss_token_accuracy(st.model, vocab, samples, eval_delta(cfg))
    summary = {"stage": cfg.stage, "steps": st.step, "train_accuracy": acc, "grad_totals": st.grad_totals}
    return _finish(cfg, st, metrics, summary, ckpt)


def run_sft(cfg: RunConfig, samples: Sequence[Sample] | None = None, write: bool = True) -> RunResult:
    if cfg.stage != "sft":
        cfg = cfg.replace(stage="sft")
    return run_pretrain(cfg, samples, write)


# -- mpo --------------------------------------------------------------------------


def run_mpo(
    cfg: RunConfig,
    pairs: Sequence[PreferencePair] | None = None,
    heldout: Sequence[PreferencePair] | None = None,
    write: bool = True,
) -> RunResult:
    vocab = load_vocab(cfg)
    if pairs is None:
        if not cfg.data.preference:
            raise ConfigError("no preference corpus configured (data.preference)")
        pairs = ingest_jsonl(cfg.data.preference, "preference", vocab)
    if heldout is None and cfg.data.heldout:
        heldout = ingest_jsonl(cfg.data.heldout, "preference", vocab)
    if not pairs:
        raise DataError("preference corpus is empty")
    st = init_state(cfg, vocab)
    vocab = st.vocab
    if st.reference is None:
        st.reference = st.model.clone()
    if st.shift is None:
        st.shift = RewardShift(0.0, cfg.mpo.shift_decay)
    st.data_digest = {"preference": corpus_digest(pairs)}
    mcfg = dataclasses.replace(cfg.mpo, scheme=cfg.weighting)
    before = preference_margins(st.model, vocab, heldout) if heldout else None

    def step_fn(st: TrainState):
        idx = st.rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False)
        batch = [pairs[i] for i in idx]
        ref = reference_logprobs(st.reference, vocab, batch)
        terms = mpo_loss(mcfg, batch, st.model, vocab, ref_logps=ref, shift=st.shift)
        shift_used = st.shift.value
        st.shift.update(terms.chosen_rewards, terms.rejected_rewards)
        rec = terms.as_dict()
        rec.pop("loss")
        return terms.loss, {**rec, "shift": shift_used}

    out_dir, ckpt = _outputs(cfg, write)
    metrics = train_loop(cfg, st, step_fn, out_dir, ckpt)
    summary = {"stage": "mpo", "steps": st.step, "shift": st.shift.value}
    if heldout:
        after = preference_margins(st.model, vocab, heldout)
        summary |= {"heldout_margin_before": float(before.mean()), "heldout_margin_after": float(after.mean())}
    return _finish(cfg, st, metrics, summary, ckpt)


# -- prm ----------------------------------------------------------------------------


def run_prm(cfg: RunConfig, corpus: Sequence[StepwiseSolution] | None = None, write: bool = True) -> RunResult:
    """Train a separate critic instance on labelled step-wise solutions."""
    vocab = load_vocab(cfg)
    if corpus is None:
        if not cfg.data.prm:
            raise ConfigError("no PRM corpus configured (data.prm)")
        corpus = ingest_jsonl(cfg.data.prm, "prm", vocab)
    if not corpus:
        raise DataError("PRM corpus is empty")
    if any(s.labels is None for s in corpus):
        raise DataError("every PRM training solution needs labels")
    st = init_state(cfg, vocab)
    vocab = st.vocab
    st.data_digest = {"prm": corpus_digest(corpus)}
    seqs = [format_multiturn(vocab, s).seq for s in corpus]
    window = st.model.cfg.context_window
    delta = 1.0 if cfg.delta in ("sample", "auto") else parse_delta(cfg.delta)

    def step_fn(st: TrainState):
        idx = st.rng.choice(len(seqs), size=min(cfg.batch_size, len(seqs)), replace=False)
        batches = pack([seqs[i] for i in idx], window)
        stats = LossStats()
        loss = pretrain_loss(st.model, batches, cfg.scheme, [[delta] * b.n_images for b in batches], stats)
        return loss, {"accuracy": stats.accuracy}

    out_dir, ckpt = _outputs(cfg, write)
    metrics = train_loop(cfg, st, step_fn, out_dir, ckpt)
    acc = slot_accuracy(ModelCritic(st.model, vocab, delta), corpus)
    return _finish(cfg, st, metrics, {"stage": "prm", "steps": st.step, "step_label_accuracy": acc}, ckpt)


# -- best-of-N -------------------------------------------------------------------------


def group_candidates(solutions: Sequence[StepwiseSolution]) -> list[list[StepwiseSolution]]:
    """Consecutive solutions sharing question and image form one candidate set."""
    groups: list[list[StepwiseSolution]] = []
    for s in solutions:
        if groups and groups[-1][0].question == s.question and groups[-1][0].image == s.image:
            groups[-1].append(s)
        else:
            groups.append([s])
    return groups


def gold_answer(sol: StepwiseSolution) -> int | None:
    if sol.question in TEMPLATES and sol.image is not None:
        return ReasoningProblem.from_image(sol.image, sol.question).answer
    return None


def run_bon(cfg: RunConfig, candidates: Sequence[StepwiseSolution] | None = None, write: bool = True) -> dict:
    vocab = load_vocab(cfg)
    if candidates is None:
        if not cfg.data.candidates:
            raise ConfigError("no candidate corpus configured (data.candidates)")
        candidates = ingest_jsonl(cfg.data.candidates, "prm", vocab)
    if cfg.bon.oracle:
        critic = OracleCritic()
    else:
        ck = load_checkpoint(cfg.paths.critic or cfg.paths.ckpt_in, "critic checkpoint")
        critic = ModelCritic(model_from_checkpoint(ck), vocab_from_checkpoint(ck))
    groups = [g[: cfg.bon.n] for g in group_candidates(candidates)]
    records = []
    for qid, cands in enumerate(groups):
        result = best_of_n(critic, cands, workers=cfg.bon.workers)
        records.append(bon_record(qid, result, gold_answer(cands[0])))
    ns = [n for n in (1, 2, 4, 8, 16, 32) if n <= cfg.bon.n]
    scored = [(g, gold_answer(g[0])) for g in groups]
    scored = [(g, a) for g, a in scored if a is not None]
    curve = {}
    if scored:
        problems = [ReasoningProblem.from_image(g[0].image, g[0].question) for g, _ in scored]
        curve = bon_accuracy_curve(critic, problems, [g for g, _ in scored], ns)
    summary = {"stage": "bon", "questions": len(groups), "accuracy_at_n": {str(k): v for k, v in curve.items()}}
    if write:
        out_dir = Path(cfg.paths.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_bon_report(records, out_dir / "bon.jsonl")
        (out_dir / "bon.summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    summary["records"] = records
    return summary


# -- eval --------------------------------------------------------------------------------


def task_of(sample: Sample) -> str:
    if sample.meta.get("task"):
        return sample.meta["task"]
    if sample.text == CAPTION_PROMPT:
        return "caption"
    if sample.text in TEMPLATES:
        return "reasoning"
    if sample.text.startswith("reverse"):
        return "reverse"
    return "other"


def _segment_positions(batch: PackedBatch, deltas: str | float | None, cfg: ModelConfig) -> np.ndarray:
    """Positions under a delta policy; ``None`` means plain arange per sample (baseline)."""
    if deltas is None:
        return np.concatenate([np.arange(b - a, dtype=np.float64) for a, b in zip(batch.offsets, batch.offsets[1:])])
    ds: list[float] = []
    for i in range(batch.n_samples):
        part = batch.part(i)
        ds += inference_deltas(part, cfg, deltas)
    return batch.positions(ds).positions


def teacher_forced(
    model: MultimodalLM, vocab: Vocab, samples: Sequence[Sample], deltas: str | float | None = "auto"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per loss token: (sample index, correct?, nll) in sample order."""
    seqs = [s.sequence(vocab) for s in samples]
    idx, hit, nll = [], [], []
    with no_grad():
        for batch in pack(seqs, model.cfg.context_window):
            pos = _segment_positions(batch, deltas, model.cfg)
            logits = model.forward(batch.seq, pos, batch.sample_ids).data.astype(np.float64)
            targets, weights = row_targets(batch, WeightingScheme.TOKEN)
            live = np.flatnonzero(weights > 0)
            rows = logits[live]
            lse = rows.max(axis=1) + np.log(np.exp(rows - rows.max(axis=1, keepdims=True)).sum(axis=1))
            idx.append(np.asarray(batch.members)[batch.sample_ids[live]])
            hit.append(rows.argmax(axis=1) == targets[live])
            nll.append(lse - rows[np.arange(len(live)), targets[live]])
    if not idx:
        return np.zeros(0, np.int64), np.zeros(0, bool), np.zeros(0)
    idx, hit, nll = np.concatenate(idx), np.concatenate(hit), np.concatenate(nll)
    order = np.argsort(idx, kind="stable")
    return idx[order], hit[order], nll[order]


def loss_token_accuracy(model: MultimodalLM, vocab: Vocab, samples: Sequence[Sample], deltas: str | float | None = "auto") -> float:
    _, hit, _ = teacher_forced(model, vocab, samples, deltas)
    return float(hit.mean()) if len(hit) else float("nan")


def greedy_answer(model: MultimodalLM, vocab: Vocab, sample: Sample, max_new: int, delta: str | float = "auto") -> str:
    prompt = build_sequence(vocab, sample.text, "", sample.image, eos=False)
    room = int(model.cfg.context_window - len(prompt) - 1)
    out = generate(model, prompt, min(max_new, room), delta=delta)
    toks = out.new_tokens[:-1] if out.new_tokens and out.new_tokens[-1] == vocab.id("<eos>") else out.new_tokens
    return vocab.decode(toks)


def reasoning_correct(sample: Sample, output: str) -> bool:
    _, answer = parse_solution(output)
    _, gold = parse_solution(sample.target)
    return answer is not None and answer == gold


def evaluate_samples(
    model: MultimodalLM, vocab: Vocab, samples: Sequence[Sample], max_new: int = 48, delta: str | float = "auto"
) -> dict:
    """Loss-token accuracy overall and per task, caption exact-match, reasoning final-answer accuracy."""
    if not samples:
        return {"samples": 0}
    idx, hit, nll = teacher_forced(model, vocab, samples, delta)
    tasks = [task_of(s) for s in samples]
    report: dict = {
        "samples": len(samples),
        "loss_tokens": int(len(hit)),
        "loss_token_accuracy": float(hit.mean()) if len(hit) else None,
        "mean_nll": float(nll.mean()) if len(nll) else None,
        "per_task": {},
    }
    task_arr = np.array(tasks)[idx] if len(idx) else np.array([])
    for t in sorted(set(tasks)):
        sel = task_arr == t
        report["per_task"][t] = {
            "samples": tasks.count(t),
            "loss_token_accuracy": float(hit[sel].mean()) if sel.any() else None,
        }
    exact, reasoning = [], []
    with no_grad():
        for s, t in zip(samples, tasks):
            if t == "caption":
                exact.append(greedy_answer(model, vocab, s, max_new, delta) == vocab.decode(vocab.encode(s.target)))
            elif t == "reasoning":
                reasoning.append(reasoning_correct(s, greedy_answer(model, vocab, s, max_new, delta)))
    report["caption_exact_match"] = float(np.mean(exact)) if exact else None
    report["reasoning_accuracy"] = float(np.mean(reasoning)) if reasoning else None
    return report


def delta_sweep(model: MultimodalLM, vocab: Vocab, samples: Sequence[Sample]) -> list[dict]:
    """One row per fixed delta plus a plain-arange baseline row."""
    rows = []
    for label, d in [("baseline", None)] + [(format_delta(d), d) for d in DELTAS]:
        _, hit, nll = teacher_forced(model, vocab, samples, d)
        rows.append({
            "delta": label,
            "loss_token_accuracy": float(hit.mean()) if len(hit) else None,
            "mean_nll": float(nll.mean()) if len(nll) else None,
        })
    return rows


def run_eval(cfg: RunConfig, samples: Sequence[Sample] | None = None, write: bool = True) -> dict:
    ck = load_checkpoint(cfg.paths.ckpt_in)
    model = model_from_checkpoint(ck)
    vocab = vocab_from_checkpoint(ck)
    if samples is None:
        if not cfg.data.eval:
            raise ConfigError("no eval corpus configured (data.eval)")
        samples = ingest_jsonl(cfg.data.eval, "pretrain", vocab)
    delta = eval_delta(cfg)
    report = {"stage": "eval", "checkpoint_stage": ck.config.get("stage"), "checkpoint_step": ck.config.get("step")}
    report |= evaluate_samples(model, vocab, samples, cfg.eval.max_new, delta)
    heldout = ingest_jsonl(cfg.data.heldout, "preference", vocab) if cfg.data.heldout else []
    if heldout:
        report["heldout_margin"] = float(preference_margins(model, vocab, heldout[: cfg.eval.heldout_pairs]).mean())
    sweep = delta_sweep(model, vocab, samples) if cfg.eval.delta_sweep and samples else None
    if write:
        out_dir = Path(cfg.paths.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        if sweep is not None:
            with open(out_dir / "delta_sweep.jsonl", "w", encoding="utf-8") as fh:
                for row in sweep:
                    fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    if sweep is not None:
        report["delta_sweep"] = sweep
    return report


RUNNERS = {"pretrain": run_pretrain, "sft": run_sft, "mpo": run_mpo, "prm": run_prm, "bon": run_bon, "eval": run_eval}
