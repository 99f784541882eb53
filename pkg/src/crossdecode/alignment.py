"""Subject-specific ridge heads into the shared latent space, and a closed-form ridge solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor
from .numerics import tape as T


@dataclass
class RidgeHead:
    subject_id: int
    weight: Tensor          # (d0, d_s)
    bias: Tensor | None     # (d0,)
    l2_penalty: float = 1e-4
    activation: str | None = None

    @property
    def n_voxels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self, prefix="ridge") -> dict[str, Tensor]:
        p = {f"{prefix}.W": self.weight}
        if self.bias is not None:
            p[f"{prefix}.b"] = self.bias
        return p


def ridge_forward(V, head: RidgeHead, extra: Tensor | None = None) -> Tensor:
    """M = W V + b (plus an optional additive term, e.g. a LoRA delta), then the head's activation if any."""
    V = T.as_tensor(V)
    if V.shape[-1] != head.n_voxels:
        raise ValueError(f"voxel vector has {V.shape[-1]} entries, head {head.subject_id} expects {head.n_voxels}")
    M = V @ T.transpose(head.weight)
    if head.bias is not None:
        M = M + head.bias
    if extra is not None:
        M = M + extra
    if head.activation:
        M = T.activation(head.activation)(M)
    return M


def ridge_penalty(head: RidgeHead) -> Tensor:
    return head.l2_penalty * T.tsum(T.square(head.weight))


def closed_form_ridge(X, Y, lam: float) -> np.ndarray:
    """Solve (X^T X + lam I) W = X^T Y for W (p x q)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if not lam > 0:
        raise ValueError(f"ridge penalty must be positive, got {lam}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("closed_form_ridge inputs must be finite")
    n, p = X.shape
    if p > n:
        # dual form: W = X^T (X X^T + lam I)^-1 Y, identical minimizer
        K = X @ X.T
        K[np.diag_indices_from(K)] += lam
        return X.T @ np.linalg.solve(K, Y)
    G = X.T @ X
    G[np.diag_indices_from(G)] += lam
    return np.linalg.solve(G, X.T @ Y)


def ridge_objective(X, Y, W, lam) -> float:
    R = np.asarray(X) @ W - np.asarray(Y)
    return float((R * R).sum() + lam * (W * W).sum())


def fit_ridge_head(subject_id, V, targets, lam, l2_penalty=1e-4, dtype=np.float32) -> RidgeHead:
    """Closed-form head with an intercept (fit on centered data)."""
    V = np.asarray(V, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    mv, mt = V.mean(0), targets.mean(0)
    W = closed_form_ridge(V - mv, targets - mt, lam).T
    b = mt - W @ mv
    return RidgeHead(subject_id, Tensor(W.astype(dtype)), Tensor(b.astype(dtype)), l2_penalty)


def init_ridge_head(subject_id, n_voxels, d0, rng, l2_penalty=1e-4, dtype=np.float32,
                    activation=None) -> RidgeHead:
    """Uniform(+-1/sqrt(fan_in)) initialization used for pretraining heads."""
    bound = 1.0 / np.sqrt(n_voxels)
    W = rng.uniform(-bound, bound, size=(d0, n_voxels)).astype(dtype)
    b = rng.uniform(-bound, bound, size=d0).astype(dtype)
    return RidgeHead(subject_id, Tensor(W), Tensor(b), l2_penalty, activation)


def init_new_subject_head(subject_id, n_voxels, d0, strategy="zero", V=None, targets=None, lam=1.0,
                          l2_penalty=1e-4, dtype=np.float32, activation=None) -> RidgeHead:
    """Head for a subject not seen in pretraining.

    ``"zero"`` gives W = 0, b = 0.  ``"closed_form_warmstart"`` needs the new
    subject's voxels ``V`` and proxy shared-latent ``targets`` for the same
    stimuli, and fits them in closed form.
    """
    if n_voxels < 1 or d0 < 1:
        raise ValueError("head dimensions must be positive")
    if strategy == "zero":
        head = RidgeHead(subject_id, Tensor(np.zeros((d0, n_voxels), dtype=dtype)),
                         Tensor(np.zeros(d0, dtype=dtype)), l2_penalty)
    elif strategy == "closed_form_warmstart":
        if V is None or targets is None:
            raise ValueError("closed_form_warmstart needs voxels and proxy targets")
        head = fit_ridge_head(subject_id, V, targets, lam, l2_penalty, dtype)
        if head.n_voxels != n_voxels or head.out_dim != d0:
            raise ValueError("warmstart data does not match the requested head shape")
    else:
        raise ValueError(f"unknown head init strategy {strategy!r}")
    head.activation = activation
    return head
