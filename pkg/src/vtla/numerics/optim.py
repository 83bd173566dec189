"""AdamW with decoupled weight decay, and the warmup/cosine LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class OptimState:
    """Per-parameter moment buffers keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimState, lr: float) -> None:
    """One AdamW update in place. Decoupled decay scales with lr, so lr=0
    leaves parameters untouched."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        g = g.astype(np.float32, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float32)
            state.v[name] = np.zeros_like(p.data, dtype=np.float32)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


class AdamW:
    """Convenience wrapper tying named parameters to an OptimState."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.95,
                 eps: float = 1e-8, weight_decay: float = 1e-4,
                 state: OptimState | None = None):
        self.params = params
        self.state = state if state is not None else OptimState(
            beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_schedule(step: int, peak: float, warmup_steps: int, total_steps: int,
                floor: float = 0.0) -> float:
    """Linear ramp 0 -> peak over warmup_steps, then cosine decay peak -> floor.

    Both endpoints and the warmup/cosine junction are exact.
    """
    if warmup_steps > total_steps:
        raise ShapeError(f"lr_schedule: warmup_steps {warmup_steps} > total_steps {total_steps}")
    if step < 0 or step > total_steps:
        raise ShapeError(f"lr_schedule: step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        if warmup_steps == 0:
            return peak
        return peak * (step / warmup_steps)
    if step == total_steps:
        return floor
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


def optim_state_records(state: OptimState) -> tuple[dict, dict]:
    """Flatten an OptimState into checkpoint records plus string metadata."""
    records = {}
    for name, arr in state.m.items():
        records[f"m/{name}"] = arr
    for name, arr in state.v.items():
        records[f"v/{name}"] = arr
    meta = {
        "step": str(state.step),
        "beta1": repr(state.beta1), "beta2": repr(state.beta2),
        "eps": repr(state.eps), "weight_decay": repr(state.weight_decay),
    }
    return records, meta


def optim_state_from_records(records: dict, meta: dict) -> OptimState:
    state = OptimState(
        beta1=float(meta["beta1"]), beta2=float(meta["beta2"]),
        eps=float(meta["eps"]), weight_decay=float(meta["weight_decay"]),
        step=int(meta["step"]))
    for key, arr in records.items():
        kind, _, name = key.partition("/")
        if kind == "m":
            state.m[name] = arr.copy()
        elif kind == "v":
            state.v[name] = arr.copy()
    return state
