"""Synthetic multi-subject cohorts with planted, voxel-localized visual fingerprints.

Each stimulus has a ground-truth latent ``u``.  Subject ``s`` responds with

    V = A_s u + gamma * mask(F_s) * g_s(u) + noise,

where ``g_s`` is a frozen one-hidden-layer tanh network private to the
subject and ``F_s`` is the voxel subset that carries it.  Image tokens, the
retrieval image embedding, low-level latents and text embeddings are all
deterministic functions of ``u`` (and its category label).
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CohortConfig
from .io import read_container, write_container
from .numerics import make_rng


@dataclass
class StimulusSpace:
    latents: np.ndarray          # (n_stimuli, latent_dim)
    labels: np.ndarray           # (n_stimuli,) int
    image_tokens: np.ndarray     # (n_stimuli, T, D)
    image_embedding: np.ndarray  # (n_stimuli, D), unit L2
    text_embedding: np.ndarray   # (n_stimuli, D_t), unit L2
    lowlevel: np.ndarray         # (n_stimuli, z_dim)
    category_text: np.ndarray    # (C, D_t), unit L2

    @property
    def n_stimuli(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]


@dataclass
class SubjectModel:
    subject_id: int
    linear_map: np.ndarray      # (d_s, latent_dim)
    fp_in: np.ndarray           # (hidden, latent_dim)
    fp_bias: np.ndarray         # (hidden,)
    fp_out: np.ndarray          # (d_s, hidden)
    fingerprint_mask: np.ndarray  # (d_s,) bool
    gamma: float
    noise_sigma: float

    @property
    def n_voxels(self) -> int:
        return self.linear_map.shape[0]

    def fingerprint(self, u: np.ndarray) -> np.ndarray:
        """Masked fingerprint response g_s(u) (before scaling by gamma)."""
        h = np.tanh(u @ self.fp_in.T + self.fp_bias)
        return (h @ self.fp_out.T) * self.fingerprint_mask


@dataclass
class SubjectData:
    subject_id: int
    train_stimuli: np.ndarray   # (n_trials,) int, presentation order
    train_voxels: np.ndarray    # (n_trials, d_s)
    test_stimuli: np.ndarray
    test_voxels: np.ndarray

    @property
    def n_voxels(self) -> int:
        return self.train_voxels.shape[1]


@dataclass
class CohortDataset:
    stimuli: StimulusSpace
    subjects: dict[int, SubjectData]
    models: dict[int, SubjectModel]
    train_ids: np.ndarray
    test_ids: np.ndarray
    session_size: int
    seed: int
    gamma: float
    meta: dict = field(default_factory=dict)

    @property
    def subject_ids(self) -> list[int]:
        return sorted(self.subjects)

    def n_sessions(self, subject_id: int) -> int:
        return int(np.ceil(len(self.subjects[subject_id].train_stimuli) / self.session_size))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def _normalize_tokens(tokens, mode):
    if mode == "none":
        return tokens
    norm = np.linalg.norm(tokens, axis=-1, keepdims=True)
    if mode == "rms":
        norm = norm / np.sqrt(tokens.shape[-1])
    return tokens / norm


def make_stimulus_space(cfg: CohortConfig, seed: int) -> StimulusSpace:
    rng = make_rng(seed, "stimuli")
    n = cfg.n_train + cfg.n_test
    L, C = cfg.latent_dim, cfg.n_categories
    centers = rng.normal(0.0, np.sqrt(cfg.between_var), size=(C, L))
    labels = rng.integers(0, C, size=n)
    latents = centers[labels] + rng.normal(0.0, np.sqrt(cfg.within_var), size=(n, L))

    tok_maps = rng.normal(0.0, 1.0 / np.sqrt(L), size=(cfg.n_tokens, cfg.token_dim, L))
    tokens = _normalize_tokens(np.einsum("tdl,nl->ntd", tok_maps, latents), cfg.token_norm)
    image_emb = _unit(tokens.mean(axis=1))

    # text lives in its own space but is a linear image of the category center
    text_map = rng.normal(0.0, 1.0 / np.sqrt(L), size=(cfg.text_dim, L))
    category_text = _unit(centers @ text_map.T)
    jitter = rng.normal(0.0, cfg.text_jitter / np.sqrt(cfg.text_dim), size=(n, cfg.text_dim))
    text = _unit(category_text[labels] + jitter)

    low_map = rng.normal(0.0, 1.0 / np.sqrt(L), size=(cfg.lowlevel_dim, L))
    lowlevel = latents @ low_map.T

    f32 = np.float32
    return StimulusSpace(latents.astype(f32), labels.astype(np.int64), tokens.astype(f32), image_emb.astype(f32),
                         text.astype(f32), lowlevel.astype(f32), category_text.astype(f32))


def _nonlinear_readout(P, fp_in, fp_bias, total_var, rng, n_mc=8192):
    """Restrict readout weights to hidden directions with no linear response to u, at unit output variance.

    The hidden layer's best linear approximation in u is estimated on a Monte-Carlo sample of the latent
    prior; projecting it out of every readout row leaves a fingerprint that is uncorrelated with any
    linear function of u, so only a non-linear decoder can use it.
    """
    L = fp_in.shape[1]
    U = rng.normal(0.0, np.sqrt(total_var), size=(n_mc, L))
    Hh = np.tanh(U @ fp_in.T + fp_bias)
    X = np.column_stack([np.ones(n_mc), U])
    coef, *_ = np.linalg.lstsq(X, Hh, rcond=None)
    Q, _ = np.linalg.qr(coef[1:].T)              # (H, L) basis of the linear response
    P = P - (P @ Q) @ Q.T
    resid = (Hh - Hh.mean(0)) @ P.T
    return P / np.sqrt(resid.var(axis=0).mean())


def make_subject_model(cfg: CohortConfig, subject_id: int, n_voxels: int, seed: int) -> SubjectModel:
    if n_voxels < cfg.latent_dim:
        raise ValueError(f"subject {subject_id}: {n_voxels} voxels < latent_dim {cfg.latent_dim}")
    rng = make_rng(seed, "subject", subject_id)
    L, H = cfg.latent_dim, cfg.fingerprint_hidden
    # unit-variance pre-activations scaled by fingerprint_gain
    total_var = cfg.between_var + cfg.within_var or 1.0
    A = rng.normal(0.0, 1.0 / np.sqrt(L * total_var), size=(n_voxels, L))
    fp_in = rng.normal(0.0, cfg.fingerprint_gain / np.sqrt(L * total_var), size=(H, L))
    fp_bias = rng.normal(0.0, 0.5, size=H)
    fp_out = _nonlinear_readout(rng.normal(0.0, 1.0 / np.sqrt(H), size=(n_voxels, H)), fp_in, fp_bias, total_var,
                                make_rng(seed, "subject-mc", subject_id))
    n_fp = int(round(cfg.fingerprint_fraction * n_voxels))
    mask = np.zeros(n_voxels, dtype=bool)
    mask[rng.choice(n_voxels, n_fp, replace=False)] = True
    # round through float32 so a reloaded model reproduces the in-memory one exactly
    A, fp_in, fp_bias, fp_out = (x.astype(np.float32).astype(np.float64) for x in (A, fp_in, fp_bias, fp_out))
    return SubjectModel(subject_id, A, fp_in, fp_bias, fp_out, mask, float(cfg.gamma), float(cfg.noise_sigma))


def subject_forward(u, subject: SubjectModel, rng: np.random.Generator | None = None,
                    noiseless: bool = False) -> np.ndarray:
    """Voxel response for latent(s) ``u``; ``noiseless`` (or ``rng=None``) drops the Gaussian term."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != subject.linear_map.shape[1]:
        raise ValueError(f"latent has {u.shape[-1]} entries, subject expects {subject.linear_map.shape[1]}")
    V = u @ subject.linear_map.T
    if subject.gamma:
        V = V + subject.gamma * subject.fingerprint(u)
    if not noiseless and rng is not None and subject.noise_sigma > 0:
        V = V + rng.normal(0.0, subject.noise_sigma, size=V.shape)
    return V


def generate_cohort(cfg: CohortConfig, seed: int) -> CohortDataset:
    cfg.validate()
    stim = make_stimulus_space(cfg, seed)
    rng = make_rng(seed, "layout")
    n_vox = rng.integers(cfg.voxels_min, cfg.voxels_max + 1, size=cfg.n_subjects)
    train_ids = np.arange(cfg.n_train)
    test_ids = np.arange(cfg.n_train, cfg.n_train + cfg.n_test)
    subjects, models = {}, {}
    for k in range(cfg.n_subjects):
        sid = k + 1
        model = make_subject_model(cfg, sid, int(n_vox[k]), seed)
        srng = make_rng(seed, "trials", sid)
        order = train_ids[srng.permutation(cfg.n_train)]
        Vtr = subject_forward(stim.latents[order], model, srng)
        Vte = subject_forward(stim.latents[test_ids], model, srng)
        subjects[sid] = SubjectData(sid, order, Vtr.astype(np.float32), test_ids.copy(), Vte.astype(np.float32))
        models[sid] = model
    return CohortDataset(stim, subjects, models, train_ids, test_ids, cfg.session_size, seed, float(cfg.gamma),
                         meta={"config": _plain(cfg)})


def take_sessions(dataset: CohortDataset, n_sessions: int, subject_id: int) -> CohortDataset:
    """Keep the first ``n_sessions * session_size`` training trials of one subject."""
    if subject_id not in dataset.subjects:
        raise KeyError(f"unknown subject {subject_id}")
    available = dataset.n_sessions(subject_id)
    if not 1 <= n_sessions <= available:
        raise ValueError(f"n_sessions must be in [1, {available}], got {n_sessions}")
    out = copy.copy(dataset)
    out.subjects = dict(dataset.subjects)
    sd = dataset.subjects[subject_id]
    keep = n_sessions * dataset.session_size
    out.subjects[subject_id] = SubjectData(sd.subject_id, sd.train_stimuli[:keep], sd.train_voxels[:keep],
                                           sd.test_stimuli, sd.test_voxels)
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_STIM_FIELDS = ("latents", "labels", "image_tokens", "image_embedding", "text_embedding", "lowlevel", "category_text")
_MODEL_FIELDS = ("linear_map", "fp_in", "fp_bias", "fp_out", "fingerprint_mask")


def _plain(cfg):
    import dataclasses
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def save_cohort(dataset: CohortDataset, path, overwrite: bool = False) -> Path:
    tensors = {f"stimuli/{f}": getattr(dataset.stimuli, f) for f in _STIM_FIELDS}
    tensors["split/train_ids"] = dataset.train_ids
    tensors["split/test_ids"] = dataset.test_ids
    subjects_meta = []
    for sid in dataset.subject_ids:
        sd, sm = dataset.subjects[sid], dataset.models[sid]
        p = f"subject{sid}"
        tensors[f"{p}/train_stimuli"] = sd.train_stimuli
        tensors[f"{p}/train_voxels"] = sd.train_voxels
        tensors[f"{p}/test_stimuli"] = sd.test_stimuli
        tensors[f"{p}/test_voxels"] = sd.test_voxels
        for f in _MODEL_FIELDS:
            tensors[f"{p}/model/{f}"] = getattr(sm, f)
        subjects_meta.append({"id": sid, "n_voxels": sd.n_voxels, "n_train": len(sd.train_stimuli),
                              "n_test": len(sd.test_stimuli), "gamma": sm.gamma, "noise_sigma": sm.noise_sigma,
                              "n_fingerprint_voxels": int(sm.fingerprint_mask.sum())})
    meta = {
        "kind": "cohort",
        "seed": dataset.seed,
        "gamma": dataset.gamma,
        "session_size": dataset.session_size,
        "n_stimuli": dataset.stimuli.n_stimuli,
        "n_categories": int(dataset.stimuli.category_text.shape[0]),
        "labels": "stimuli/labels",
        "subjects": subjects_meta,
        "cohort_config": dataset.meta.get("config", {}),
    }
    return write_container(path, tensors, meta, overwrite=overwrite)


def load_cohort(path) -> CohortDataset:
    tensors, meta = read_container(path)
    if meta.get("kind") != "cohort":
        raise ValueError(f"{path} is not a cohort dataset")
    sf = {f: tensors[f"stimuli/{f}"] for f in _STIM_FIELDS}
    sf["labels"] = sf["labels"].astype(np.int64)
    stim = StimulusSpace(**sf)
    subjects, models = {}, {}
    for s in meta["subjects"]:
        sid = s["id"]
        p = f"subject{sid}"
        subjects[sid] = SubjectData(sid, tensors[f"{p}/train_stimuli"].astype(np.int64), tensors[f"{p}/train_voxels"],
                                    tensors[f"{p}/test_stimuli"].astype(np.int64), tensors[f"{p}/test_voxels"])
        mf = {f: tensors[f"{p}/model/{f}"].astype(np.float64) for f in _MODEL_FIELDS}
        mf["fingerprint_mask"] = mf["fingerprint_mask"] > 0.5
        models[sid] = SubjectModel(sid, gamma=s["gamma"], noise_sigma=s["noise_sigma"], **mf)
    return CohortDataset(stim, subjects, models, tensors["split/train_ids"].astype(np.int64),
                         tensors["split/test_ids"].astype(np.int64), meta["session_size"], meta["seed"],
                         meta["gamma"], meta={"config": meta.get("cohort_config", {})})


def dataset_digest(dataset: CohortDataset) -> str:
    h = hashlib.sha256()
    for f in _STIM_FIELDS:
        h.update(np.ascontiguousarray(getattr(dataset.stimuli, f)).tobytes())
    for sid in dataset.subject_ids:
        sd = dataset.subjects[sid]
        for arr in (sd.train_stimuli, sd.train_voxels, sd.test_stimuli, sd.test_voxels):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
