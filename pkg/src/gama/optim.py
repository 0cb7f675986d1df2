"""Adam optimizer and the central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AutodiffError
from .tensor import Tape, Tensor


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def init_adam(params: list[Tensor]) -> AdamState:
    return AdamState(m=[np.zeros_like(p.data) for p in params],
                     v=[np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[list[Tensor], AdamState]:
    """One bias-corrected Adam update; eps sits outside the square root."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must align")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            raise AutodiffError("adam_step received a missing gradient")
        g = np.asarray(g, dtype=p.data.dtype)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = p.data - update.astype(p.data.dtype, copy=False)
        if not np.all(np.isfinite(p.data)):
            raise AutodiffError("adam_step produced non-finite parameters")
    return params, state


def zero_grads(params: list[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_check(fn, point: Tensor, h: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` maps one Tensor to a scalar Tensor; other inputs go in via
    closure. Runs in float64 regardless of the point's dtype. Per
    coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    base = point.data.astype(np.float64)
    p = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = fn(p)
        if loss.data.size != 1:
            raise AutodiffError("finite_diff_check needs a scalar-valued fn")
        tape.backward(loss)
    analytic = (np.zeros_like(base) if p.grad is None else p.grad).reshape(-1)

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    probe = base.copy()
    probe_flat = probe.reshape(-1)
    for i in range(flat.size):
        orig = probe_flat[i]
        probe_flat[i] = orig + h
        with Tape(recording=False):
            up = fn(Tensor(probe.copy(), dtype=np.float64)).item()
        probe_flat[i] = orig - h
        with Tape(recording=False):
            down = fn(Tensor(probe.copy(), dtype=np.float64)).item()
        probe_flat[i] = orig
        numeric[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
