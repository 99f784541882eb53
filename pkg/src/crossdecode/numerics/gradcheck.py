from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tape import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: int

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    def __str__(self):
        rows = [f"{k}: {v:.3e}" for k, v in sorted(self.max_rel_error.items(), key=lambda kv: -kv[1])]
        return f"grad_check over {self.checked} entries, worst {self.worst:.3e}\n  " + "\n  ".join(rows)


def grad_check(loss_fn, params: list[Tensor], eps: float = 1e-6, floor: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients with central differences ``(f(x+eps) - f(x-eps)) / 2eps``.

    ``loss_fn()`` must rebuild the scalar loss from the current parameter
    values.  Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps near-zero gradients from reporting meaningless ratios.
    ``max_entries`` subsamples entries per parameter (all by default).
    """
    if not params:
        raise ValueError("grad_check needs at least one parameter")
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    for i, p in enumerate(params):
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters; {_name(p, i)} is {p.data.dtype}")
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        loss = loss_fn()
    _finite(loss, "analytic pass")
    tape.backward(loss)

    report = {}
    checked = 0
    for i, p in enumerate(params):
        name = _name(p, i)
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        worst = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = _value(loss_fn, name)
            flat[k] = orig - eps
            fm = _value(loss_fn, name)
            flat[k] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report[name] = worst
        checked += idx.size
    return GradCheckReport(report, checked)


def _name(p, i):
    return p.name or f"param[{i}]"


def _value(loss_fn, name):
    val = float(loss_fn().data)
    if not np.isfinite(val):
        raise FloatingPointError(f"non-finite loss while perturbing {name}")
    return val


def _finite(loss, where):
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"non-finite loss in {where}")
