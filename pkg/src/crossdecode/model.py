"""Model containers, the full forward pass, voxel standardization and checkpoint IO."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterSet, LoRABlock, SkipLoRABlock
from .alignment import RidgeHead, init_ridge_head, ridge_forward
from .backbone import (AdaptiveProjector, BackboneModel, BackboneOutput, HeadSet, Linear, ResidualBlock,
                       backbone_forward, heads_forward, init_backbone, init_heads, init_projector, nearest_upsample,
                       project_pivot)
from .config import ExperimentConfig
from .io import read_container, write_container
from .numerics import Tensor, make_rng
from .numerics import tape as T


@dataclass
class VoxelScaler:
    """Per-voxel z-scoring with statistics from one subject's training trials."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, V, floor=1e-6):
        V = np.asarray(V, dtype=np.float64)
        return cls(V.mean(0).astype(np.float32), np.maximum(V.std(0), floor).astype(np.float32))

    def __call__(self, V, dtype=np.float32):
        V = np.asarray(V)
        if V.shape[-1] != self.mean.size:
            raise ValueError(f"scaler fitted on {self.mean.size} voxels, got {V.shape[-1]}")
        return ((V - self.mean) / self.std).astype(dtype)


@dataclass
class SharedModel:
    ridge: dict[int, RidgeHead]
    backbone: BackboneModel
    heads: HeadSet
    projector: AdaptiveProjector
    scalers: dict[int, VoxelScaler] = field(default_factory=dict)

    def parameters(self, ridge=True, projector=True) -> dict[str, Tensor]:
        p = {}
        if ridge:
            for sid, head in sorted(self.ridge.items()):
                p.update(head.parameters(f"ridge.{sid}"))
        p.update(self.backbone.parameters())
        p.update(self.heads.parameters())
        if projector:
            p.update(self.projector.parameters())
        return p

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}


@dataclass
class AdaptedModel:
    shared: SharedModel
    head: RidgeHead
    adapters: AdapterSet | None
    projector: AdaptiveProjector
    scaler: VoxelScaler

    @property
    def subject_id(self) -> int:
        return self.head.subject_id

    def trainable(self) -> dict[str, Tensor]:
        p = self.head.parameters("ridge")
        if self.adapters is not None:
            p.update(self.adapters.parameters())
        p.update(self.projector.parameters())
        return p


@dataclass
class ForwardOutput:
    M: Tensor
    bb: BackboneOutput
    e: Tensor        # unit retrieval embedding (B, D)
    z: Tensor        # low-level latent (B, z_dim)
    g: Tensor        # prior tokens (B, T, D)
    p: Tensor        # unit pivot embedding (B, D_t)


def build_shared_model(cfg: ExperimentConfig, n_voxels: dict[int, int], seed: int | None = None,
                       dtype=np.float32) -> SharedModel:
    """Randomly initialized model with a ridge head for each subject in ``n_voxels``."""
    seed = cfg.seed if seed is None else seed
    rng = make_rng(seed, "init")
    m, c = cfg.model, cfg.cohort
    ridge = {sid: init_ridge_head(sid, d, m.d0, make_rng(seed, "init-ridge", sid), cfg.loss.ridge_l2, dtype,
                                  m.nonlinear_head)
             for sid, d in sorted(n_voxels.items())}
    backbone = init_backbone(rng, m.d0, m.hidden, m.n_blocks, c.n_tokens, c.token_dim, dtype)
    heads = init_heads(rng, c.n_tokens, c.token_dim, c.lowlevel_grid, m.lowlevel_channels, m.refiner_hidden,
                       m.prior_hidden, dtype)
    projector = init_projector(rng, c.token_dim, c.text_dim, dtype)
    return SharedModel(ridge, backbone, heads, projector)


def forward(shared: SharedModel, head: RidgeHead, V, adapters: AdapterSet | None = None,
            projector: AdaptiveProjector | None = None) -> ForwardOutput:
    """Standardized voxels -> ridge head (+LoRA) -> backbone (+LoRA, Skip-LoRA) -> heads -> pivot."""
    V = T.as_tensor(V)
    extra = adapters.lora_delta("ridge", V) if adapters is not None else None
    M = ridge_forward(V, head, extra)
    bb = backbone_forward(M, shared.backbone, adapters, V)
    e, z, g = heads_forward(bb.tokens, shared.heads, adapters)
    p = T.l2_normalize(project_pivot(g, projector or shared.projector))
    return ForwardOutput(M, bb, e, z, g, p)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _arch(shared: SharedModel) -> dict:
    return {"d0": shared.backbone.d0, "hidden": shared.backbone.hidden, "n_blocks": len(shared.backbone.blocks),
            "n_tokens": shared.backbone.n_tokens, "token_dim": shared.backbone.token_dim,
            "grid": list(shared.heads.grid), "low_channels": shared.heads.low_channels,
            "refiner_hidden": shared.heads.low_ref1.d_out, "prior_hidden": shared.heads.prior_fc1.d_out,
            "text_dim": shared.projector.out_dim}


def _head_meta(head: RidgeHead) -> dict:
    return {"subject_id": head.subject_id, "l2_penalty": head.l2_penalty, "activation": head.activation,
            "bias": head.bias is not None}


def save_shared(shared: SharedModel, path, meta: dict | None = None, overwrite=False):
    tensors = {k: v.data for k, v in shared.parameters().items()}
    for sid, sc in shared.scalers.items():
        tensors[f"scaler.{sid}.mean"] = sc.mean
        tensors[f"scaler.{sid}.std"] = sc.std
    body = {"kind": "shared", "arch": _arch(shared), "ridge": [_head_meta(h) for _, h in sorted(shared.ridge.items())]}
    body.update(meta or {})
    return write_container(path, tensors, body, overwrite=overwrite)


def _lin(t, name, bias=True):
    return Linear(Tensor(t[f"{name}.W"]), Tensor(t[f"{name}.b"]) if bias else None)


def _head_from(t, prefix, hm) -> RidgeHead:
    return RidgeHead(hm["subject_id"], Tensor(t[f"{prefix}.W"]), Tensor(t[f"{prefix}.b"]) if hm["bias"] else None,
                     hm["l2_penalty"], hm["activation"])


def load_shared(path) -> tuple[SharedModel, dict]:
    t, meta = read_container(path)
    if meta.get("kind") != "shared":
        raise ValueError(f"{path} is not a shared-model checkpoint")
    a = meta["arch"]
    blocks = [ResidualBlock(Tensor(t[f"backbone.block{i}.ln_gamma"]), Tensor(t[f"backbone.block{i}.ln_beta"]),
                            _lin(t, f"backbone.block{i}.fc1"), _lin(t, f"backbone.block{i}.fc2"))
              for i in range(a["n_blocks"])]
    backbone = BackboneModel(_lin(t, "backbone.input"), blocks, _lin(t, "backbone.token"), a["n_tokens"], a["token_dim"])
    h, w, _ = a["grid"]
    heads = HeadSet(*(_lin(t, f"heads.{k}") for k in
                      ("retrieval", "low_fc", "low_ref1", "low_ref2", "prior_fc1", "prior_fc2")),
                    upsample=nearest_upsample(h, w).astype(np.float32), grid=tuple(a["grid"]),
                    low_channels=a["low_channels"])
    ridge = {hm["subject_id"]: _head_from(t, f"ridge.{hm['subject_id']}", hm) for hm in meta["ridge"]}
    scalers = {hm["subject_id"]: VoxelScaler(t[f"scaler.{hm['subject_id']}.mean"], t[f"scaler.{hm['subject_id']}.std"])
               for hm in meta["ridge"] if f"scaler.{hm['subject_id']}.mean" in t}
    shared = SharedModel(ridge, backbone, heads, AdaptiveProjector(Tensor(t["projector.W"])), scalers)
    return shared, meta


def save_adapted(model: AdaptedModel, path, meta: dict | None = None, overwrite=False):
    tensors = {k: v.data for k, v in model.head.parameters("ridge").items()}
    tensors.update({k: v.data for k, v in model.projector.parameters().items()})
    tensors["scaler.mean"] = model.scaler.mean
    tensors["scaler.std"] = model.scaler.std
    ad = None
    if model.adapters is not None:
        tensors.update({k: v.data for k, v in model.adapters.parameters().items()})
        ad = {"n_voxels": model.adapters.n_voxels,
              "lora": {s: b.scale for s, b in model.adapters.lora.items()},
              "skip": {s: [b.lora.scale, b.activation] for s, b in model.adapters.skip.items()},
              "skip_loss_excluded": sorted(model.adapters.skip_loss_excluded)}
    body = {"kind": "adapted", "subject_id": model.subject_id, "head": _head_meta(model.head), "adapters": ad}
    body.update(meta or {})
    return write_container(path, tensors, body, overwrite=overwrite)


def load_adapted(path, shared: SharedModel) -> tuple[AdaptedModel, dict]:
    t, meta = read_container(path)
    if meta.get("kind") != "adapted":
        raise ValueError(f"{path} is not a fine-tuned subject checkpoint")
    head = _head_from(t, "ridge", meta["head"])
    if head.out_dim != shared.backbone.d0:
        raise ValueError(f"subject head outputs {head.out_dim} dims, shared model expects {shared.backbone.d0}")
    adapters = None
    ad = meta["adapters"]
    if ad is not None:
        adapters = AdapterSet(meta["subject_id"], ad["n_voxels"], skip_loss_excluded=frozenset(ad["skip_loss_excluded"]))
        for s, scale in ad["lora"].items():
            adapters.lora[s] = LoRABlock(Tensor(t[f"lora.{s}.A"]), Tensor(t[f"lora.{s}.B"]), scale)
        for s, (scale, act) in ad["skip"].items():
            adapters.skip[s] = SkipLoRABlock(LoRABlock(Tensor(t[f"skip.{s}.A"]), Tensor(t[f"skip.{s}.B"]), scale), act)
    model = AdaptedModel(shared, head, adapters, AdaptiveProjector(Tensor(t["projector.W"])),
                         VoxelScaler(t["scaler.mean"], t["scaler.std"]))
    return model, meta
