"""Retrieval, identification, reconstruction, semantic and brain-space metrics, plus voxel importance."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import closed_form_ridge
from .cohort import CohortDataset, subject_forward
from .config import ExperimentConfig
from .model import AdaptedModel, forward
from .numerics import rowwise_pearson
from .numerics import tape as T

log = logging.getLogger(__name__)


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def retrieve(queries, candidates) -> float:
    """Top-1 accuracy (%) where query i is paired with candidate i; cosine similarity, ties to the lowest index."""
    q, c = _unit(queries), _unit(candidates)
    if c.shape[0] == 0:
        raise ValueError("empty retrieval pool")
    if q.shape != c.shape:
        raise ValueError(f"each query needs exactly one paired candidate: {q.shape} vs {c.shape}")
    sims = q @ c.T
    hits = np.argmax(sims, axis=1) == np.arange(len(q))   # argmax returns the first maximum
    return 100.0 * float(hits.mean())


def retrieval_pools(n, pool_size, repeats, rng) -> list[np.ndarray]:
    """Random pools of ``pool_size`` test items; a test set no larger than the pool is used whole, once."""
    if n <= pool_size:
        return [np.arange(n)]
    return [np.sort(rng.choice(n, pool_size, replace=False)) for _ in range(repeats)]


def pooled_retrieval(brain, image, pools) -> dict:
    """Image retrieval (brain query -> image pool) and brain retrieval (image query -> brain pool)."""
    img = np.mean([retrieve(brain[p], image[p]) for p in pools])
    brn = np.mean([retrieve(image[p], brain[p]) for p in pools])
    return {"image_retrieval": float(img), "brain_retrieval": float(brn),
            "retrieval_chance": 100.0 / min(len(p) for p in pools)}


def two_way_identification(pred, true) -> float:
    """Percent of (i, k != i) comparisons where pred_i is more similar to true_i than to true_k."""
    p, t = _unit(pred), _unit(true)
    n = p.shape[0]
    if n < 2:
        raise ValueError("two-way identification needs at least 2 samples")
    sims = p @ t.T
    own = np.diag(sims)[:, None]
    wins = (own > sims).sum(axis=1)   # the diagonal never wins against itself
    return 100.0 * float(wins.sum() / (n * (n - 1)))


def pixcorr(z_hat, z) -> float:
    """Mean over samples of the Pearson correlation across latent elements; constant samples count as 0."""
    r = rowwise_pearson(z_hat, z)
    if np.isnan(r).any():
        log.warning("pixcorr: %d constant reconstructions counted as 0", int(np.isnan(r).sum()))
    return float(np.nan_to_num(r, nan=0.0).mean())


def semantic_correct(p, bank) -> np.ndarray:
    """Index of the most cosine-similar bank entry for each pivot embedding."""
    bank = np.asarray(bank)
    if bank.size == 0 or bank.shape[0] == 0:
        raise ValueError("empty category bank")
    p = np.atleast_2d(p)
    return np.argmax(_unit(p) @ _unit(bank).T, axis=1)


def blend_reconstruction(high, low, ratio=(3.0, 1.0)) -> np.ndarray:
    high, low = np.asarray(high), np.asarray(low)
    if high.shape != low.shape:
        raise ValueError(f"blend shape mismatch {high.shape} vs {low.shape}")
    a, b = ratio
    if a < 0 or b < 0 or a + b <= 0:
        raise ValueError("blend ratio must be two non-negative weights with a positive sum")
    return (a * high + b * low) / (a + b)


def brain_correlation(u_hat, subject, V_true, regions=None) -> dict:
    """Re-encode latents through the noiseless forward model; mean per-voxel Pearson (across samples) per region.

    Default regions: all voxels, the fingerprint set and its complement.  Empty regions are skipped.
    """
    V_hat = subject_forward(u_hat, subject, noiseless=True)
    V_true = np.asarray(V_true, dtype=np.float64)
    if V_hat.shape != V_true.shape:
        raise ValueError(f"re-encoded shape {V_hat.shape} does not match observed {V_true.shape}")
    r = rowwise_pearson(V_hat.T, V_true.T)
    if regions is None:
        fp = subject.fingerprint_mask
        regions = {"all": np.ones_like(fp), "fingerprint": fp, "non_fingerprint": ~fp}
    out = {}
    for name, mask in regions.items():
        vals = r[np.asarray(mask, dtype=bool)]
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            log.info("brain_correlation: region %s is empty, skipped", name)
            continue
        out[name] = float(vals.mean())
    return out


def normalize_map(x) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all ones."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


def voxel_importance(model: AdaptedModel) -> dict[str, np.ndarray]:
    """Mean |weight| per input voxel for the ridge head, its LoRA, and the first Skip-LoRA, each scaled to [0, 1]."""
    maps = {"ridge": normalize_map(np.abs(model.head.weight.data).mean(axis=0))}
    ad = model.adapters
    if ad is not None and "ridge" in ad.lora:
        maps["lora"] = normalize_map(np.abs(ad.lora["ridge"].delta_weight()).mean(axis=0))
    if ad is not None and ad.skip:
        first = next(iter(ad.skip.values()))
        maps["skip_lora"] = normalize_map(np.abs(first.lora.delta_weight()).mean(axis=0))
    return maps


# ---------------------------------------------------------------------------
# end-to-end evaluation
# ---------------------------------------------------------------------------


def predict(model: AdaptedModel, V_raw, batch=100) -> dict:
    """Run the adapted model on raw voxels without recording gradients."""
    V = model.scaler(V_raw, model.head.weight.data.dtype)
    outs = {"e": [], "z": [], "g": [], "p": []}
    for i in range(0, len(V), batch):
        o = forward(model.shared, model.head, V[i:i + batch], model.adapters, model.projector)
        for k in outs:
            outs[k].append(getattr(o, k).data.astype(np.float64))
    return {k: np.concatenate(v) for k, v in outs.items()}


@dataclass
class Decoders:
    """Least-squares maps fitted on ground-truth training tokens: tokens -> low-level latent and tokens -> u."""
    render: np.ndarray
    decode: np.ndarray
    mean_tokens: np.ndarray
    mean_low: np.ndarray
    mean_u: np.ndarray

    @classmethod
    def fit(cls, cohort: CohortDataset, stimuli, lam):
        s = cohort.stimuli
        X = s.image_tokens[stimuli].reshape(len(stimuli), -1).astype(np.float64)
        mx = X.mean(0)
        low = s.lowlevel[stimuli].astype(np.float64)
        u = s.latents[stimuli].astype(np.float64)
        return cls(closed_form_ridge(X - mx, low - low.mean(0), lam), closed_form_ridge(X - mx, u - u.mean(0), lam),
                   mx, low.mean(0), u.mean(0))

    def lowlevel(self, tokens):
        return (tokens.reshape(len(tokens), -1) - self.mean_tokens) @ self.render + self.mean_low

    def latent(self, tokens):
        return (tokens.reshape(len(tokens), -1) - self.mean_tokens) @ self.decode + self.mean_u


@dataclass
class MetricsReport:
    metrics: dict
    config_hash: str
    seed: int
    maps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "config_hash": self.config_hash, "seed": self.seed,
                "maps": {k: np.round(np.asarray(v, dtype=np.float64), 8).tolist() for k, v in self.maps.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write(self, path, overwrite=False):
        path = Path(path)
        if path.exists() and not overwrite:
            raise FileExistsError(f"{path} exists; pass overwrite to replace it")
        path.write_text(self.to_json())
        return path


def evaluate(model: AdaptedModel, cohort: CohortDataset, cfg: ExperimentConfig, decoders: Decoders | None = None,
             with_maps=True) -> MetricsReport:
    sid = model.subject_id
    sub = cohort.subjects[sid]
    stim = cohort.stimuli
    test = sub.test_stimuli
    out = predict(model, sub.test_voxels)
    ec = cfg.eval
    m = {}
    pools = retrieval_pools(len(test), ec.pool_size, ec.pool_repeats, np.random.default_rng(cfg.seed))
    m.update(pooled_retrieval(out["e"], stim.image_embedding[test], pools))
    if decoders is None:
        decoders = Decoders.fit(cohort, cohort.train_ids, ec.decoder_l2)
    high_emb = out["g"].mean(axis=1)
    m["two_way_high"] = two_way_identification(high_emb, stim.image_embedding[test])
    high = decoders.lowlevel(out["g"])
    low = out["z"]
    final = blend_reconstruction(high, low, ec.blend_ratio)
    true_low = stim.lowlevel[test]
    m["two_way_low"] = two_way_identification(final, true_low)
    m["pixcorr_low"] = pixcorr(low, true_low)
    m["pixcorr_high"] = pixcorr(high, true_low)
    m["pixcorr"] = pixcorr(final, true_low)
    labels = stim.labels[test]
    m["semantic_accuracy"] = 100.0 * float((semantic_correct(out["p"], stim.category_text) == labels).mean())
    oracle = _unit(stim.image_tokens[test].mean(axis=1) @ model.shared.projector.weight.data.T)
    m["semantic_accuracy_oracle"] = 100.0 * float((semantic_correct(oracle, stim.category_text) == labels).mean())
    m["semantic_chance"] = 100.0 / stim.category_text.shape[0]
    for region, r in brain_correlation(decoders.latent(out["g"]), cohort.models[sid], sub.test_voxels).items():
        m[f"brain_corr_{region}"] = r
    maps = {}
    if with_maps:
        mask = cohort.models[sid].fingerprint_mask
        for kind, imp in voxel_importance(model).items():
            maps[f"importance_{kind}"] = imp
            m[f"importance_{kind}_fingerprint"] = float(imp[mask].mean()) if mask.any() else float("nan")
            m[f"importance_{kind}_other"] = float(imp[~mask].mean()) if (~mask).any() else float("nan")
    m = {k: float(np.round(v, 10)) for k, v in m.items()}
    return MetricsReport(m, cfg.hash(), cfg.seed, maps)
