from __future__ import annotations

import numpy as np

VARIANCE_FLOOR = 1e-12


class ConstantInputError(ValueError):
    """Raised when a correlation is requested for a (near-)constant vector."""


def pearson(a, b, floor: float = VARIANCE_FLOOR) -> float:
    """Sample Pearson correlation of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("pearson needs at least 2 entries")
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(ac @ ac) / a.size
    vb = float(bc @ bc) / b.size
    if va <= floor or vb <= floor:
        raise ConstantInputError("pearson is undefined for a constant vector")
    r = float(ac @ bc) / np.sqrt(float(ac @ ac) * float(bc @ bc))
    return float(np.clip(r, -1.0, 1.0))


def rowwise_pearson(a, b, floor: float = VARIANCE_FLOOR):
    """Pearson r for each row pair; rows where either side is constant yield NaN."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    saa = (ac * ac).sum(1)
    sbb = (bc * bc).sum(1)
    n = a.shape[1]
    ok = (saa / n > floor) & (sbb / n > floor)
    r = np.full(a.shape[0], np.nan)
    r[ok] = (ac[ok] * bc[ok]).sum(1) / np.sqrt(saa[ok] * sbb[ok])
    return np.clip(r, -1.0, 1.0)
