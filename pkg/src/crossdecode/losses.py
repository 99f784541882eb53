"""Training objectives.

All contrastive losses take L2-normalized embeddings and a temperature;
logits are cosine similarities divided by ``tau``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, beta_sample, derangement
from .numerics import tape as T
from .numerics.stats import VARIANCE_FLOOR

log = logging.getLogger(__name__)
_warned: set[str] = set()


def _warn_once(msg):
    if msg not in _warned:
        _warned.add(msg)
        log.warning(msg)


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


@dataclass
class MixPair:
    lam: np.ndarray     # (B,)
    perm: np.ndarray    # (B,) partner index j(i), never i
    V_mix: np.ndarray   # (B, d_s)


def mixco_mix(V, beta_params=(0.15, 0.15), rng=None, lam=None) -> MixPair:
    """V_mix_i = lam_i V_i + (1 - lam_i) V_j(i), with j a derangement of the batch."""
    V = np.asarray(V)
    n = V.shape[0]
    if n < 2:
        raise ValueError("voxel mixing needs a batch of at least 2")
    if rng is None:
        raise ValueError("mixco_mix needs a random generator")
    perm = derangement(rng, n)
    if lam is None:
        lam = beta_sample(rng, beta_params[0], beta_params[1], size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
    w = lam.astype(V.dtype)[:, None]
    return MixPair(lam, perm, w * V + (1 - w) * V[perm])


def _soft_ce(logits: Tensor, probs) -> Tensor:
    """Mean over rows of the cross-entropy between target rows ``probs`` and softmax(logits)."""
    return -T.mean(T.tsum(T.log_softmax(logits, axis=-1) * probs, axis=-1))


def bimixco_loss(pred, target, mix: MixPair | None, tau: float) -> Tensor:
    """Bidirectional MixCo: lam-weighted cross-entropy toward targets i and j(i), averaged over both directions.

    ``pred`` are embeddings of the mixed inputs; ``mix=None`` means no mixing (lam = 1).
    """
    _check_tau(tau)
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _same_shape(pred, target, "bimixco_loss")
    n = pred.shape[0]
    probs = np.eye(n)
    if mix is not None:
        if len(mix.lam) != n:
            raise ValueError("mix pair does not match the batch")
        probs = np.diag(mix.lam)
        probs[np.arange(n), mix.perm] += 1.0 - mix.lam
    probs = probs.astype(pred.data.dtype)
    logits = (pred @ T.transpose(target)) / tau
    return 0.5 * (_soft_ce(logits, probs) + _soft_ce(T.transpose(logits), probs.T))


def softclip_loss(pred, target, tau: float) -> Tensor:
    """Contrastive loss toward soft labels softmax(target target^T / tau), symmetric over both directions."""
    _check_tau(tau)
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    _same_shape(pred, target, "softclip_loss")
    tt = target.data @ target.data.T / tau
    tt = np.exp(tt - tt.max(axis=-1, keepdims=True))
    soft = tt / tt.sum(axis=-1, keepdims=True)
    logits = (pred @ T.transpose(target)) / tau
    return 0.5 * (_soft_ce(logits, soft) + _soft_ce(T.transpose(logits), soft))


def lowlevel_loss(z_hat, z) -> Tensor:
    """Mean absolute error per element."""
    z_hat, z = T.as_tensor(z_hat), T.as_tensor(z)
    _same_shape(z_hat, z, "lowlevel_loss")
    return T.mean(T.tabs(z_hat - z))


def prior_loss(g_hat, g) -> Tensor:
    """Mean squared error per element."""
    g_hat, g = T.as_tensor(g_hat), T.as_tensor(g)
    _same_shape(g_hat, g, "prior_loss")
    return T.mean(T.square(g_hat - g))


def rowwise_abs_pearson(a, b) -> Tensor:
    """|Pearson r| across the feature axis for each row; rows where either side is constant give 0."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    _same_shape(a, b, "skip_loss")
    ac = a - T.mean(a, axis=-1, keepdims=True)
    bc = b - T.mean(b, axis=-1, keepdims=True)
    n = a.shape[-1]
    saa = T.tsum(T.square(ac), axis=-1)
    sbb = T.tsum(T.square(bc), axis=-1)
    valid = ((saa.data / n > VARIANCE_FLOOR) & (sbb.data / n > VARIANCE_FLOOR)).astype(a.data.dtype)
    if not valid.all():
        _warn_once("skip_loss: constant activation vector, its correlation counts as 0")
    # invalid rows get denominator 1 and are zeroed, so no NaN reaches the tape
    den = T.sqrt(saa * sbb * valid + (1.0 - valid))
    r = T.tsum(ac * bc, axis=-1) / den * valid
    return T.tabs(r)


def skip_loss(linear, skip, names=None, excluded=("token",)) -> Tensor:
    """Mean over samples and included layers of |pearson(M_linear, M_skip)| per sample."""
    if len(linear) != len(skip):
        raise ValueError("skip_loss needs one skip output per linear output")
    names = names if names is not None else [str(i) for i in range(len(linear))]
    terms = [T.mean(rowwise_abs_pearson(lin, sk))
             for name, lin, sk in zip(names, linear, skip) if sk is not None and name not in excluded]
    if not terms:
        dtype = T.as_tensor(linear[0]).data.dtype if linear else np.float64
        return Tensor(np.zeros((), dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def pivot_loss(p, t, tau: float, bidirectional: bool = False) -> Tensor:
    """InfoNCE from pivot embeddings to their text embeddings (cross-entropy of row i toward column i)."""
    _check_tau(tau)
    p, t = T.as_tensor(p), T.as_tensor(t)
    _same_shape(p, t, "pivot_loss")
    eye = np.eye(p.shape[0], dtype=p.data.dtype)
    logits = (p @ T.transpose(t)) / tau
    loss = _soft_ce(logits, eye)
    if bidirectional:
        loss = 0.5 * (loss + _soft_ce(T.transpose(logits), eye))
    return loss


def total_multi(parts: dict, alphas) -> Tensor:
    """L_prior + a1 L_lowlevel + a2 L_contrastive."""
    a1, a2 = alphas[0], alphas[1]
    return T.as_tensor(parts["prior"]) + a1 * T.as_tensor(parts["lowlevel"]) + a2 * T.as_tensor(parts["contrastive"])


def total_new(parts: dict, alphas) -> Tensor:
    """total_multi + a3 L_skip + a4 L_pivot."""
    a3, a4 = alphas[2], alphas[3]
    return total_multi(parts, alphas) + a3 * T.as_tensor(parts["skip"]) + a4 * T.as_tensor(parts["pivot"])
