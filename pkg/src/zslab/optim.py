"""Adam with bias correction and a linear-warmup learning-rate schedule.

The effective rate ramps linearly from 0 to ``lr`` over ``warmup_steps`` and
stays constant afterwards. Setting ``inverse_sqrt_decay`` switches the
post-warmup phase to lr * sqrt(warmup/step) decay instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 4000
    inverse_sqrt_decay: bool = False


@dataclass
class AdamState:
    """Per-parameter first/second moments keyed by parameter name."""

    hyper: AdamHyper = field(default_factory=AdamHyper)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def effective_lr(hyper: AdamHyper, step: int) -> float:
    if hyper.warmup_steps <= 0:
        ramp = 1.0
    else:
        ramp = min(step / hyper.warmup_steps, 1.0)
    if hyper.inverse_sqrt_decay and step > hyper.warmup_steps:
        return hyper.lr * (hyper.warmup_steps / step) ** 0.5
    return hyper.lr * ramp


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """Apply one Adam update in place; parameters absent from ``grads`` are
    left untouched (their moments are not decayed either), which is how layer
    freezing guarantees bitwise-unchanged values."""
    state.step += 1
    t = state.step
    h = state.hyper
    lr_t = effective_lr(h, t)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        p = params[name]
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}"
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * g * g
        mhat = m / (1.0 - h.beta1**t)
        vhat = v / (1.0 - h.beta2**t)
        p.data -= lr_t * mhat / (np.sqrt(vhat) + h.eps)
    return params, state
