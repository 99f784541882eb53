"""Multi-subject pretraining, new-subject fine-tuning and the contrastive-loss schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .adapters import default_plan, inject_adapters
from .alignment import init_new_subject_head, ridge_penalty
from .cohort import CohortDataset, take_sessions
from .config import ExperimentConfig
from .io import read_container, write_container
from .model import AdaptedModel, SharedModel, VoxelScaler, build_shared_model, forward
from .numerics import OptimState, Tape, Tensor, adamw_step, clip_grad_norm, make_rng, onecycle_lr
from .numerics import tape as T

log = logging.getLogger(__name__)

# ablation variants as config overrides on top of the full model
VARIANTS = {
    "ridge-only": {"adapters": {"use_lora": False, "use_skip": False}, "alphas": (None, None, 0.0, 0.0)},
    "lora-only": {"adapters": {"use_lora": True, "use_skip": False}, "alphas": (None, None, 0.0, 0.0)},
    "lora-skip": {"adapters": {"use_lora": True, "use_skip": True}, "alphas": (None, None, None, 0.0)},
    "full": {},
    "nonlinear-head": {"model": {"nonlinear_head": "gelu"}},
    "rank4": {"adapters": {"rank": 4}},
    "rank8": {"adapters": {"rank": 8}},
    "rank16": {"adapters": {"rank": 16}},
}


def variant_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(VARIANTS)}")
    v = VARIANTS[name]
    sections = {k: dict(v[k]) for k in ("adapters", "model") if k in v}
    if "alphas" in v:
        alphas = tuple(a if b is None else b for a, b in zip(cfg.loss.alphas, v["alphas"]))
        sections["loss"] = {"alphas": alphas}
    return cfg.replace(**sections)


def contrastive_schedule(epoch: int, epochs: int, switch_fraction: float = 1.0 / 3.0) -> str:
    """"bimixco" (with voxel mixing) until the final ``switch_fraction`` of epochs, then "softclip"."""
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    switch = epochs - int(round(epochs * switch_fraction))
    return "bimixco" if epoch < switch else "softclip"


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)

    def series(self, key="total") -> np.ndarray:
        return np.array([e[key] for e in self.epochs])


@dataclass
class Targets:
    tokens: np.ndarray
    embedding: np.ndarray
    lowlevel: np.ndarray
    text: np.ndarray

    @classmethod
    def of(cls, cohort: CohortDataset, stimuli, dtype=np.float32):
        s = cohort.stimuli
        return cls(s.image_tokens[stimuli].astype(dtype), s.image_embedding[stimuli].astype(dtype),
                   s.lowlevel[stimuli].astype(dtype), s.text_embedding[stimuli].astype(dtype))


def _batches(n, size, rng):
    order = rng.permutation(n)
    out = [order[i:i + size] for i in range(0, n, size)]
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _rows(x, idx):
    return None if x is None else T.take(x, idx, axis=0)


def batch_losses(shared, head, Vb, tgt: Targets, idx, kind, cfg: ExperimentConfig, rng, adapters=None,
                 projector=None, new_subject=False) -> dict:
    """Loss components for one batch.  Under BiMixCo the mixed voxels go through the network alongside the
    clean ones and only the contrastive term sees them."""
    lc = cfg.loss
    B = len(idx)
    mix = None
    if kind == "bimixco":
        mix = L.mixco_mix(Vb, lc.beta_params, rng)
        out = forward(shared, head, np.concatenate([Vb, mix.V_mix]), adapters, projector)
        clean, mixed = np.arange(B), np.arange(B, 2 * B)
        e_con = _rows(out.e, mixed)
        z, g = _rows(out.z, clean), _rows(out.g, clean)
        p = _rows(out.p, clean) if new_subject else None
        lin = [_rows(x, clean) for x in out.bb.linear]
        sk = [_rows(x, clean) for x in out.bb.skip]
    else:
        out = forward(shared, head, Vb, adapters, projector)
        e_con, z, g, p = out.e, out.z, out.g, out.p
        lin, sk = out.bb.linear, out.bb.skip
    emb = tgt.embedding[idx]
    parts = {
        "prior": L.prior_loss(g, tgt.tokens[idx]),
        "lowlevel": L.lowlevel_loss(z, tgt.lowlevel[idx]),
        "contrastive": (L.bimixco_loss(e_con, emb, mix, lc.tau) if kind == "bimixco"
                        else L.softclip_loss(e_con, emb, lc.tau)),
    }
    if new_subject:
        parts["skip"] = L.skip_loss(lin, sk, out.bb.names, adapters.skip_loss_excluded if adapters else ())
        parts["pivot"] = L.pivot_loss(p, tgt.text[idx], lc.tau, lc.pivot_bidirectional)
        total = L.total_new(parts, lc.alphas)
    else:
        total = L.total_multi(parts, lc.alphas)
    parts["total"] = total + ridge_penalty(head)
    return parts


def _set_trainable(params: dict, flag: bool):
    for t in params.values():
        t.requires_grad = flag
        t.grad = None


def _update(groups, lr, clip):
    """One clipped AdamW step over ``[(params, state), ...]``; the norm is clipped jointly across groups."""
    grads = [{k: t.grad for k, t in params.items() if t.grad is not None} for params, _ in groups]
    if clip:
        joint = {f"{i}/{k}": g for i, gs in enumerate(grads) for k, g in gs.items()}
        clip_grad_norm(joint, clip)
        grads = [{k: joint[f"{i}/{k}"] for k in gs} for i, gs in enumerate(grads)]
    for (params, state), gs in zip(groups, grads):
        adamw_step({k: params[k].data for k in gs}, gs, state, lr)
        for t in params.values():
            t.grad = None


def _mean_parts(acc: list[dict]) -> dict:
    return {k: float(np.mean([a[k] for a in acc])) for k in acc[0]}


# ---------------------------------------------------------------------------
# resumable state
# ---------------------------------------------------------------------------


def _save_state(path, params: dict, states: dict[str, OptimState], epoch, history: History, meta):
    tensors = {f"param/{k}": t.data for k, t in params.items()}
    opt_meta = {}
    for sname, st in states.items():
        opt_meta[sname] = st.step
        for k in st.exp_avg:
            tensors[f"opt/{sname}/m/{k}"] = st.exp_avg[k]
            tensors[f"opt/{sname}/v/{k}"] = st.exp_avg_sq[k]
    body = {"kind": "train-state", "epoch": epoch, "history": history.epochs, "opt_steps": opt_meta, **meta}
    write_container(path, tensors, body, overwrite=True, filename="state.json")


def _load_state(path, params: dict, states: dict[str, OptimState]):
    t, meta = read_container(path, filename="state.json")
    for k, p in params.items():
        p.data[...] = t[f"param/{k}"]
    for sname, st in states.items():
        st.step = meta["opt_steps"][sname]
        pre = f"opt/{sname}/"
        for key, arr in t.items():
            if key.startswith(pre + "m/"):
                st.exp_avg[key[len(pre) + 2:]] = arr.copy()
            elif key.startswith(pre + "v/"):
                st.exp_avg_sq[key[len(pre) + 2:]] = arr.copy()
    return meta["epoch"], History(meta["history"])


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain_subjects(cohort: CohortDataset, cfg: ExperimentConfig) -> list[int]:
    return [s for s in cohort.subject_ids if s != cfg.new_subject]


def pretrain(cohort: CohortDataset, cfg: ExperimentConfig, state_dir=None, resume=False,
             stop_after: int | None = None) -> tuple[SharedModel, History]:
    """Jointly train per-subject ridge heads and the shared backbone/heads, one subject per step in turn.

    ``state_dir`` receives a resumable training state after every epoch; ``stop_after`` ends the run early
    after that many epochs (used to exercise resuming).
    """
    subjects = pretrain_subjects(cohort, cfg)
    if len(subjects) < 2:
        raise ValueError("pretraining needs at least 2 subjects besides the held-out one")
    if any(len(cohort.subjects[s].train_stimuli) == 0 for s in subjects):
        raise ValueError("empty training set")
    tc, dtype = cfg.train, np.dtype(cfg.train.dtype)
    shared = build_shared_model(cfg, {s: cohort.subjects[s].n_voxels for s in subjects}, dtype=dtype)
    data = {}
    for s in subjects:
        sd = cohort.subjects[s]
        shared.scalers[s] = VoxelScaler.fit(sd.train_voxels)
        data[s] = (shared.scalers[s](sd.train_voxels, dtype), Targets.of(cohort, sd.train_stimuli, dtype))

    core = shared.parameters(ridge=False, projector=False)
    heads = {s: shared.ridge[s].parameters(f"ridge.{s}") for s in subjects}
    _set_trainable(shared.parameters(), True)
    states = {"core": OptimState(lr=tc.pretrain_lr, weight_decay=tc.weight_decay)}
    states.update({f"ridge{s}": OptimState(lr=tc.pretrain_lr, weight_decay=tc.weight_decay) for s in subjects})
    all_params = shared.parameters(projector=False)

    steps_per_epoch = sum(-(-len(data[s][1].embedding) // tc.pretrain_batch_size) for s in subjects)
    total = steps_per_epoch * tc.pretrain_epochs
    history, start = History(), 0
    if resume and state_dir is not None and (Path(state_dir) / "state.json").exists():
        start, history = _load_state(state_dir, all_params, states)
    step = start * steps_per_epoch
    for epoch in range(start, tc.pretrain_epochs):
        kind = contrastive_schedule(epoch, tc.pretrain_epochs, tc.switch_fraction)
        rng = make_rng(cfg.seed, "pretrain", epoch)
        plans = {s: _batches(len(data[s][1].embedding), tc.pretrain_batch_size, rng) for s in subjects}
        acc = []
        for k in range(max(len(p) for p in plans.values())):
            for s in subjects:
                if k >= len(plans[s]):
                    continue
                idx = plans[s][k]
                V, tgt = data[s]
                lr = onecycle_lr(min(step, total - 1), total, tc.pretrain_lr, tc.pct_start, tc.div_factor,
                                 tc.final_div)
                with Tape() as tape:
                    parts = batch_losses(shared, shared.ridge[s], V[idx], tgt, idx, kind, cfg, rng)
                    tape.backward(parts["total"])
                _update([(core, states["core"]), (heads[s], states[f"ridge{s}"])], lr, tc.grad_clip)
                acc.append({k2: float(v.data) for k2, v in parts.items()})
                step += 1
        history.epochs.append({"epoch": epoch, "contrastive_kind": kind, **_mean_parts(acc)})
        log.info("pretrain epoch %d %s loss %.4f", epoch, kind, history.epochs[-1]["total"])
        if state_dir is not None:
            _save_state(state_dir, all_params, states, epoch + 1, history, {"phase": "pretrain"})
        if stop_after is not None and epoch + 1 - start >= stop_after and epoch + 1 < tc.pretrain_epochs:
            break
    _train_projector(shared, cohort, subjects, cfg)
    _set_trainable(shared.parameters(), False)
    return shared, history


def _train_projector(shared: SharedModel, cohort, subjects, cfg: ExperimentConfig):
    """Fit the pivot projector on ground-truth tokens against text embeddings."""
    tc = cfg.train
    if tc.projector_epochs < 1:
        return
    dtype = np.dtype(tc.dtype)
    stim = np.unique(np.concatenate([cohort.subjects[s].train_stimuli for s in subjects]))
    tgt = Targets.of(cohort, stim, dtype)
    params = shared.projector.parameters()
    _set_trainable(params, True)
    state = OptimState(lr=tc.pretrain_lr, weight_decay=tc.weight_decay)
    n_batches = -(-len(stim) // tc.pretrain_batch_size)
    total = max(2, n_batches * tc.projector_epochs)
    step = 0
    for epoch in range(tc.projector_epochs):
        rng = make_rng(cfg.seed, "projector", epoch)
        for idx in _batches(len(stim), tc.pretrain_batch_size, rng):
            with Tape() as tape:
                p = T.l2_normalize(T.mean(T.as_tensor(tgt.tokens[idx]), axis=1) @ T.transpose(shared.projector.weight))
                loss = L.pivot_loss(p, tgt.text[idx], cfg.loss.tau, cfg.loss.pivot_bidirectional)
                tape.backward(loss)
            _update([(params, state)], onecycle_lr(min(step, total - 1), total, tc.pretrain_lr, tc.pct_start,
                                               tc.div_factor, tc.final_div), tc.grad_clip)
            step += 1
    _set_trainable(params, False)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


def init_adapted(shared: SharedModel, cohort: CohortDataset, cfg: ExperimentConfig,
                 subject_id: int | None = None) -> AdaptedModel:
    """Fresh head (and fresh adapters, if enabled) for the new subject on top of ``shared``."""
    sid = cfg.new_subject if subject_id is None else subject_id
    if sid in shared.ridge:
        raise ValueError(f"subject {sid} was part of pretraining; fine-tuning it would leak training data")
    sub = take_sessions(cohort, cfg.sessions, sid).subjects[sid]
    dtype = np.dtype(cfg.train.dtype)
    scaler = VoxelScaler.fit(sub.train_voxels)
    head = init_new_subject_head(sid, sub.n_voxels, shared.backbone.d0, "zero", l2_penalty=cfg.loss.ridge_l2,
                                 dtype=dtype, activation=cfg.model.nonlinear_head)
    ac = cfg.adapters
    adapters = None
    if ac.use_lora or ac.use_skip:
        plan = default_plan(shared, ac.lora_min_width, ac.use_lora, ac.use_skip)
        if ac.use_lora:
            plan.lora_sites.insert(0, "ridge")
        adapters = inject_adapters(shared, plan, ac.rank, make_rng(cfg.seed, "adapters", sid), sub.n_voxels, sid,
                                   ac.lora_alpha, ac.skip_activation, dtype)
    return AdaptedModel(shared, head, adapters, shared.projector.copy(), scaler)


def finetune(shared: SharedModel, cohort: CohortDataset, cfg: ExperimentConfig, subject_id: int | None = None,
             state_dir=None, resume=False, stop_after: int | None = None) -> tuple[AdaptedModel, History]:
    """Train the new subject's head, adapters and projector; every shared weight stays frozen."""
    model = init_adapted(shared, cohort, cfg, subject_id)
    sid = model.subject_id
    sub = take_sessions(cohort, cfg.sessions, sid).subjects[sid]
    tc, dtype = cfg.train, np.dtype(cfg.train.dtype)
    V = model.scaler(sub.train_voxels, dtype)
    tgt = Targets.of(cohort, sub.train_stimuli, dtype)

    frozen = shared.snapshot()
    _set_trainable(shared.parameters(), False)
    params = model.head.parameters("ridge")
    if model.adapters is not None:
        params.update(model.adapters.parameters())
    if cfg.loss.alphas[3] > 0:
        params.update(model.projector.parameters())
    _set_trainable(params, True)
    states = {"ft": OptimState(lr=tc.lr, weight_decay=tc.weight_decay)}

    n = len(tgt.embedding)
    steps_per_epoch = len(_batches(n, tc.batch_size, make_rng(0)))
    total = max(2, steps_per_epoch * tc.epochs)
    history, start = History(), 0
    if resume and state_dir is not None and (Path(state_dir) / "state.json").exists():
        start, history = _load_state(state_dir, params, states)
    step = start * steps_per_epoch
    for epoch in range(start, tc.epochs):
        kind = contrastive_schedule(epoch, tc.epochs, tc.switch_fraction)
        rng = make_rng(cfg.seed, "finetune", sid, epoch)
        acc = []
        for idx in _batches(n, tc.batch_size, rng):
            lr = onecycle_lr(min(step, total - 1), total, tc.lr, tc.pct_start, tc.div_factor, tc.final_div)
            with Tape() as tape:
                parts = batch_losses(shared, model.head, V[idx], tgt, idx, kind, cfg, rng, model.adapters,
                                     model.projector, new_subject=True)
                tape.backward(parts["total"])
            _update([(params, states["ft"])], lr, tc.grad_clip)
            acc.append({k: float(v.data) for k, v in parts.items()})
            step += 1
        history.epochs.append({"epoch": epoch, "contrastive_kind": kind, **_mean_parts(acc)})
        log.info("finetune subject %d epoch %d %s loss %.4f", sid, epoch, kind, history.epochs[-1]["total"])
        if state_dir is not None:
            _save_state(state_dir, params, states, epoch + 1, history, {"phase": "finetune", "subject_id": sid})
        if stop_after is not None and epoch + 1 - start >= stop_after and epoch + 1 < tc.epochs:
            break
    _set_trainable(params, False)
    for k, v in shared.parameters().items():
        if not np.array_equal(v.data, frozen[k]):
            raise AssertionError(f"shared parameter {k} changed during fine-tuning")
    return model, history
