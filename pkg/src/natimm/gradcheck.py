"""Central finite-difference checks for the autodiff engine.

The numeric side only ever calls forward code, so it stays independent of the
backward closures it is checking. By default both sides run in float64 so that
the comparison measures derivative formulas rather than float32 cancellation in
the difference quotient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    checked: int = 0
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)
    max_rel_err: float = 0.0
    max_abs_err: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def _compare(report: GradCheckReport, name: str, idx, analytic: float, numeric: float, rtol: float, atol: float):
    err = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    rel = err / scale if scale > 0 else 0.0
    report.checked += 1
    report.max_abs_err = max(report.max_abs_err, err)
    if err > atol:
        report.max_rel_err = max(report.max_rel_err, rel)
        if rel > rtol:
            report.failures.append((name, tuple(int(i) for i in idx), analytic, numeric))


def check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backward() gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the graph from the current ``params`` data on every
    call. With ``max_coords`` set, that many coordinates are sampled per tensor.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = loss_fn().item()
            flat[c] = orig - h
            down = loss_fn().item()
            flat[c] = orig
            numeric = (up - down) / (2 * h)
            _compare(report, name, np.unravel_index(c, p.shape), float(analytic[name].reshape(-1)[c]), numeric, rtol, atol)
    return report


def check_op(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    dtype=np.float64,
) -> GradCheckReport:
    """Gradient check of a scalar function of array inputs (all differentiated)."""
    tensors = {f"x{i}": Tensor(np.array(x, dtype=dtype), requires_grad=True) for i, x in enumerate(inputs)}
    args = list(tensors.values())
    return check_params(lambda: fn(*args), tensors, h=h, rtol=rtol, atol=atol)
