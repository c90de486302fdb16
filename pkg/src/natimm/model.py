"""Toy ViT-MLP-LLM.

images -> patch one-hots -> ViT block(s) -> 2x2 pixel unshuffle -> 2-layer MLP
projector -> visual token embeddings, spliced into the decoder's token
embeddings at the image spans. The decoder uses rotary attention evaluated at
the (possibly fractional) positions it is given, and a block-diagonal causal
mask so packed samples never see each other.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data.packing import isolation_mask
from .data.samples import SyntheticImage, TokenSequence
from .errors import CapacityError, ConfigError, DimensionError
from .positions import DELTAS, choose_inference_delta, compute_positions, rotary_tables
from .tensor import Tensor, no_grad
from .vocab import EOS


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    context_window: int = 512
    patch_grid: tuple[int, int] = (8, 8)
    projector_hidden: int = 64
    seed: int = 0
    patch_size: int = 2
    palette_size: int = 16
    vit_dim: int = 32
    vit_layers: int = 1
    vit_heads: int = 2
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    init_std: float = 0.02

    def __post_init__(self):
        self.patch_grid = tuple(int(x) for x in self.patch_grid)
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(f"d_model {self.d_model} != n_heads {self.n_heads} * head_dim {self.head_dim}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even, got {self.head_dim}")
        if self.vit_dim % self.vit_heads:
            raise ConfigError("vit_dim must be divisible by vit_heads")
        gh, gw = self.patch_grid
        if gh % 2 or gw % 2:
            raise ConfigError(f"patch grid {self.patch_grid} must have even sides for pixel unshuffle")

    @property
    def visual_tokens(self) -> int:
        return (self.patch_grid[0] // 2) * (self.patch_grid[1] // 2)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.patch_grid[0] * self.patch_size, self.patch_grid[1] * self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_grid"] = list(self.patch_grid)
        return d


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> None:
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def _ones(n: int) -> Tensor:
    return Tensor(np.ones(n, dtype=np.float32), requires_grad=True)


class Attention(Module):
    def __init__(self, d: int, n_heads: int, head_dim: int, rng: np.random.Generator, std: float):
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.wqkv = _param(rng, (d, 3 * n_heads * head_dim), std)
        self.wo = _param(rng, (n_heads * head_dim, d), std)

    def __call__(self, x: Tensor, mask: np.ndarray | None, rope: tuple[np.ndarray, np.ndarray] | None) -> Tensor:
        lead = x.ndim - 2
        n = x.shape[-2]
        qkv = (x @ self.wqkv).reshape(x.shape[:-1] + (3, self.n_heads, self.head_dim))
        # -> (3, ..., heads, T, head_dim)
        qkv = qkv.transpose((lead + 1,) + tuple(range(lead)) + (lead + 2, lead, lead + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        if rope is not None:
            q = T.rope(q, *rope)
            k = T.rope(k, *rope)
        nd = q.ndim
        swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
        scores = (q @ k.transpose(swap)) * (1.0 / math.sqrt(self.head_dim))
        att = T.softmax(scores, axis=-1, mask=mask)
        out = att @ v  # (..., heads, T, head_dim)
        back = tuple(range(lead)) + (lead + 1, lead, lead + 2)
        out = out.transpose(back).reshape(x.shape[:-2] + (n, self.n_heads * self.head_dim))
        return out @ self.wo


class MLP(Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator, std: float, bias: bool = False):
        self.w1 = _param(rng, (d_in, hidden), std)
        self.w2 = _param(rng, (hidden, d_out), std)
        if bias:
            self.b1 = Tensor(np.zeros(hidden, np.float32), requires_grad=True)
            self.b2 = Tensor(np.zeros(d_out, np.float32), requires_grad=True)
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        h = x @ self.w1
        if self.bias:
            h = h + self.b1
        h = T.gelu(h) @ self.w2
        if self.bias:
            h = h + self.b2
        return h


class Block(Module):
    def __init__(self, d: int, n_heads: int, head_dim: int, mlp_ratio: int, rng: np.random.Generator, std: float):
        self.norm1 = _ones(d)
        self.attn = Attention(d, n_heads, head_dim, rng, std)
        self.norm2 = _ones(d)
        self.mlp = MLP(d, mlp_ratio * d, d, rng, std)

    def __call__(self, x: Tensor, mask, rope) -> Tensor:
        x = x + self.attn(T.rms_norm(x, self.norm1), mask, rope)
        return x + self.mlp(T.rms_norm(x, self.norm2))


def pixel_unshuffle(grid: Tensor) -> Tensor:
    """(..., H, W, C) -> (..., H/2, W/2, 4C); each 2x2 block is concatenated row-major."""
    *lead, h, w, c = grid.shape
    if h % 2 or w % 2:
        raise DimensionError(f"pixel unshuffle needs even H and W, got {h}x{w}")
    nl = len(lead)
    x = grid.reshape(tuple(lead) + (h // 2, 2, w // 2, 2, c))
    x = x.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return x.reshape(tuple(lead) + (h // 2, w // 2, 4 * c))


def pixel_shuffle(grid: Tensor) -> Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    *lead, h, w, c4 = grid.shape
    if c4 % 4:
        raise DimensionError(f"pixel shuffle needs channels divisible by 4, got {c4}")
    c = c4 // 4
    nl = len(lead)
    x = grid.reshape(tuple(lead) + (h, w, 2, 2, c))
    x = x.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return x.reshape(tuple(lead) + (2 * h, 2 * w, c))


def image_patches(images: Sequence[SyntheticImage], cfg: ModelConfig) -> np.ndarray:
    """One-hot palette cells grouped into patches: (N, gh*gw, ps*ps*palette)."""
    h, w = cfg.image_shape
    ps = cfg.patch_size
    for img in images:
        if (img.h, img.w) != (h, w):
            raise DimensionError(f"image {img.h}x{img.w} does not match the {h}x{w} expected by patch grid {cfg.patch_grid}")
    grids = np.stack([img.grid for img in images])
    onehot = np.eye(cfg.palette_size, dtype=np.float32)[grids]  # (N, H, W, P)
    gh, gw = cfg.patch_grid
    x = onehot.reshape(len(images), gh, ps, gw, ps, cfg.palette_size).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(len(images), gh * gw, ps * ps * cfg.palette_size)


class VisionEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        std = cfg.init_std
        gh, gw = cfg.patch_grid
        feat = cfg.patch_size * cfg.patch_size * cfg.palette_size
        self.patch_embed = _param(rng, (feat, cfg.vit_dim), std)
        self.pos_embed = _param(rng, (gh * gw, cfg.vit_dim), std)
        self.blocks = [
            Block(cfg.vit_dim, cfg.vit_heads, cfg.vit_dim // cfg.vit_heads, cfg.mlp_ratio, rng, std)
            for _ in range(cfg.vit_layers)
        ]
        self.norm = _ones(cfg.vit_dim)
        self.grid = (gh, gw)

    def __call__(self, patches: np.ndarray) -> Tensor:
        """(N, gh*gw, feat) -> feature grid (N, gh, gw, vit_dim)."""
        x = Tensor(patches) @ self.patch_embed + self.pos_embed
        for block in self.blocks:
            x = block(x, None, None)
        x = T.rms_norm(x, self.norm)
        return x.reshape((patches.shape[0],) + self.grid + (x.shape[-1],))


class Projector(Module):
    """Two affine layers with GELU between, mapping unshuffled features to d_model."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.mlp = MLP(4 * cfg.vit_dim, cfg.projector_hidden, cfg.d_model, rng, cfg.init_std, bias=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


class LanguageModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        std = cfg.init_std
        self.tok_embed = _param(rng, (cfg.vocab_size, cfg.d_model), std)
        self.blocks = [
            Block(cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.mlp_ratio, rng, std) for _ in range(cfg.n_layers)
        ]
        self.norm = _ones(cfg.d_model)
        self.head = _param(rng, (cfg.d_model, cfg.vocab_size), std)

    def embed(self, tokens: np.ndarray) -> Tensor:
        return T.embedding(self.tok_embed, tokens)

    def __call__(self, x: Tensor, mask: np.ndarray, rope) -> Tensor:
        for block in self.blocks:
            x = block(x, mask, rope)
        return T.rms_norm(x, self.norm) @ self.head


class MultimodalLM(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.vision = VisionEncoder(cfg, rng)
        self.projector = Projector(cfg, rng)
        self.lm = LanguageModel(cfg, rng)

    def clone(self) -> MultimodalLM:
        return copy.deepcopy(self)

    def encode_images(self, images: Sequence[SyntheticImage]) -> Tensor:
        """Visual token embeddings (N, visual_tokens, d_model)."""
        feats = self.vision(image_patches(images, self.cfg))
        grid = pixel_unshuffle(feats)
        n, gh, gw, c = grid.shape
        return self.projector(grid.reshape(n, gh * gw, c))

    def forward(
        self,
        seq: TokenSequence,
        positions: np.ndarray,
        sample_ids: np.ndarray | None = None,
        visual_embeds: Tensor | None = None,
    ) -> Tensor:
        """Logits (T, vocab). Row i conditions on tokens <= i of the same sample."""
        positions = np.asarray(positions, dtype=np.float64)
        if len(positions) != len(seq):
            raise DimensionError(f"{len(positions)} positions for {len(seq)} tokens")
        if len(seq) == 0:
            raise DimensionError("cannot run the model on an empty sequence")
        if positions.max() >= self.cfg.context_window:
            raise CapacityError(
                f"max position {positions.max():g} exceeds context window {self.cfg.context_window}"
            )
        x = self.lm.embed(seq.tokens)
        if seq.spans:
            if visual_embeds is None:
                visual_embeds = self.encode_images(seq.images)
            rows = seq.visual_rows()
            flat = visual_embeds.reshape(-1, self.cfg.d_model)
            if flat.shape[0] != len(rows):
                raise DimensionError(f"{flat.shape[0]} visual embeddings for {len(rows)} visual tokens")
            x = T.scatter_rows(x, rows, flat)
        if sample_ids is None:
            sample_ids = np.zeros(len(seq), dtype=np.int64)
        mask = isolation_mask(sample_ids)
        rope = rotary_tables(positions, self.cfg.head_dim, self.cfg.rope_base)
        return self.lm(x, mask, rope)

    __call__ = forward

    def param_group(self, name: str) -> str:
        return name.split(".", 1)[0]


def inference_deltas(seq: TokenSequence, cfg: ModelConfig, policy: str | float = "auto", extra_text: int = 0) -> list[float]:
    """One delta per image: a fixed member of the set, or the largest that fits (``auto``)."""
    if not seq.spans:
        return []
    if policy == "auto":
        delta = choose_inference_delta(seq.text_count + extra_text, seq.visual_count, cfg.context_window)
    else:
        delta = float(policy)
        if delta not in DELTAS:
            raise ConfigError(f"delta {policy} is not in the delta set")
    return [delta] * len(seq.spans)


def sequence_positions(seq: TokenSequence, deltas: Sequence[float]) -> np.ndarray:
    return compute_positions(seq.modality, seq.spans, deltas).positions


@dataclass
class Generation:
    seq: TokenSequence
    new_tokens: list[int] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)


def generate(
    model: MultimodalLM,
    prompt: TokenSequence,
    max_new: int,
    mode: str = "greedy",
    seed: int | None = None,
    delta: str | float = "auto",
    temperature: float = 1.0,
    stop_token: int | None = EOS,
) -> Generation:
    """Decode up to ``max_new`` tokens; generated tokens are marked loss-bearing.

    ``greedy`` breaks ties toward the lowest token id; ``sample`` draws from the
    tempered softmax with ``np.random.default_rng(seed)``. Recorded log-probs are
    the untempered model log-probabilities of the emitted tokens.
    """
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"unknown decoding mode {mode!r}")
    cfg = model.cfg
    deltas = inference_deltas(prompt, cfg, delta, extra_text=max_new)
    last = compute_positions(prompt.modality, prompt.spans, deltas).max_position if len(prompt) else -1.0
    if last + max_new >= cfg.context_window:
        raise CapacityError(f"prompt ends at position {last:g}; no room for {max_new} new tokens in window {cfg.context_window}")
    rng = np.random.default_rng(seed) if mode == "sample" else None
    seq = prompt
    out = Generation(seq)
    with no_grad():
        visual = model.encode_images(prompt.images) if prompt.spans else None
        for _ in range(max_new):
            positions = sequence_positions(seq, deltas)
            logits = model.forward(seq, positions, visual_embeds=visual).data[-1].astype(np.float64)
            lsm = logits - logits.max()
            lsm = lsm - np.log(np.exp(lsm).sum())
            if mode == "greedy":
                tok = int(np.argmax(logits))
            else:
                z = logits / temperature
                p = np.exp(z - z.max())
                cdf = np.cumsum(p)
                tok = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                tok = min(tok, len(p) - 1)
            seq = seq.extend_text([tok], loss=True)
            out.new_tokens.append(tok)
            out.logprobs.append(float(lsm[tok]))
            if stop_token is not None and tok == stop_token:
                break
    out.seq = seq
    return out
