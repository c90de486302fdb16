"""SGD and Adam over named parameter tensors.

A step whose gradients contain NaN/Inf is skipped and reported by returning
``False``; the caller decides whether that is fatal (the trainer treats it so).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "step": self.step,
            "skipped": self.skipped,
        }


def grads_finite(params: dict[str, Tensor]) -> bool:
    return all(p.grad is None or np.isfinite(p.grad).all() for p in params.values())


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    # fixed order: parameter registration order
    total = math.sqrt(sum(float(np.dot(p.grad.ravel(), p.grad.ravel())) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm and math.isfinite(total):
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


class Optimizer:
    def __init__(self, params: dict[str, Tensor], state: OptimizerState):
        self.params = params
        self.state = state

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        for name, p in self.params.items():
            if p.grad is not None and p.grad.shape != p.data.shape:
                raise DimensionError(f"gradient for {name} has shape {p.grad.shape}, parameter {p.data.shape}")
        if not grads_finite(self.params):
            self.state.skipped += 1
            log.warning("non-finite gradient at step %d; update skipped", self.state.step)
            return False
        self.state.step += 1
        for name, p in self.params.items():
            if p.grad is not None:
                self._update(name, p)
        return True

    def _update(self, name: str, p: Tensor) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-2, weight_decay: float = 0.0):
        super().__init__(params, OptimizerState(kind="sgd", lr=lr, weight_decay=weight_decay))

    def _update(self, name: str, p: Tensor) -> None:
        g = p.grad
        if self.state.weight_decay:
            g = g + self.state.weight_decay * p.data
        p.data = (p.data - self.state.lr * g).astype(p.data.dtype)


class Adam(Optimizer):
    """Adam with decoupled weight decay (AdamW when ``weight_decay`` > 0)."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        state: OptimizerState | None = None,
    ):
        if state is None:
            state = OptimizerState(kind="adam", lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        super().__init__(params, state)
        for name, p in params.items():
            state.m.setdefault(name, np.zeros_like(p.data))
            state.v.setdefault(name, np.zeros_like(p.data))
            if state.m[name].shape != p.data.shape or state.v[name].shape != p.data.shape:
                raise DimensionError(f"moment buffers for {name} do not match parameter shape {p.data.shape}")

    def _update(self, name: str, p: Tensor) -> None:
        st = self.state
        b1, b2 = st.betas
        g = p.grad
        m = st.m[name] = (b1 * st.m[name] + (1.0 - b1) * g).astype(p.data.dtype)
        v = st.v[name] = (b2 * st.v[name] + (1.0 - b2) * (g * g)).astype(p.data.dtype)
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        update = (m / c1) / (np.sqrt(v / c2) + st.eps)
        data = p.data
        if st.weight_decay:
            data = data - (st.lr * st.weight_decay) * data
        p.data = (data - st.lr * update).astype(p.data.dtype)


def make_optimizer(params: dict[str, Tensor], kind: str = "adam", **kw) -> Optimizer:
    if kind == "adam":
        return Adam(params, **kw)
    if kind == "sgd":
        kw.pop("betas", None)
        kw.pop("eps", None)
        return SGD(params, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")
