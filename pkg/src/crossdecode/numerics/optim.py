"""AdamW, one-cycle learning-rate schedule and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params, grads, state: OptimState, lr: float | None = None):
    """One decoupled-weight-decay Adam update, in place on ``params``.

    ``params`` and ``grads`` map parameter names to arrays.  A missing or
    ``None`` gradient is treated as zero so that weight decay still applies.
    Returns ``(params, state)``.
    """
    lr = state.lr if lr is None else lr
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = state.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def onecycle_lr(step: int, total_steps: int, max_lr: float = 3e-4, pct_start: float = 0.3,
                div_factor: float = 25.0, final_div: float = 1e3) -> float:
    """Cosine warmup from ``max_lr/div_factor`` to ``max_lr``, then cosine anneal to ``max_lr/final_div``."""
    if total_steps < 2:
        raise ValueError("total_steps must be >= 2")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = peak_step(total_steps, pct_start)
    if step <= peak:
        if peak == 0:
            return max_lr
        lo, hi, frac = max_lr / div_factor, max_lr, step / peak
    else:
        lo, hi, frac = max_lr, max_lr / final_div, (step - peak) / (total_steps - 1 - peak)
    return hi + (lo - hi) * 0.5 * (1.0 + math.cos(math.pi * frac))


def peak_step(total_steps: int, pct_start: float = 0.3) -> int:
    return int(round(pct_start * (total_steps - 1)))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total
