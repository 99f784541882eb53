"""Low-rank adapters (LoRA) on frozen linear layers, and non-linear Skip-LoRA blocks fed by raw voxels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor
from .numerics import tape as T


@dataclass
class LoRABlock:
    A: Tensor      # (r, d_in), zero at construction
    B: Tensor      # (d_out, r)
    scale: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)

    def n_params(self) -> int:
        return self.A.size + self.B.size


@dataclass
class SkipLoRABlock:
    lora: LoRABlock
    activation: str = "tanh"

    def n_params(self) -> int:
        return self.lora.n_params()


def make_lora(d_in, d_out, rank, alpha, rng, dtype=np.float32) -> LoRABlock:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > min(d_in, d_out) / 4:
        raise ValueError(f"rank {rank} is not low-rank for a {d_out}x{d_in} layer (need r <= {min(d_in, d_out) // 4})")
    A = np.zeros((rank, d_in), dtype=dtype)
    B = rng.normal(0.0, 1.0 / np.sqrt(rank), size=(d_out, rank)).astype(dtype)
    return LoRABlock(Tensor(A), Tensor(B), alpha / rank)


def lora_forward(x, block: LoRABlock) -> Tensor:
    """Delta y = scale * B (A x), batched over rows of x."""
    x = T.as_tensor(x)
    if x.shape[-1] != block.d_in:
        raise ValueError(f"LoRA block expects {block.d_in} inputs, got {x.shape[-1]}")
    return (x @ T.transpose(block.A)) @ T.transpose(block.B) * block.scale


def skip_lora_forward(V, block: SkipLoRABlock) -> Tensor:
    return T.activation(block.activation)(lora_forward(V, block.lora))


def merge_lora(W, block) -> np.ndarray:
    """W' = W + scale B A for a (d_out, d_in) weight; only linear blocks can be merged."""
    if isinstance(block, SkipLoRABlock):
        raise TypeError("Skip-LoRA blocks are non-linear and cannot be merged into a weight")
    W = W.data if isinstance(W, Tensor) else np.asarray(W)
    if W.shape != (block.d_out, block.d_in):
        raise ValueError(f"weight shape {W.shape} does not match block ({block.d_out}, {block.d_in})")
    return W + block.delta_weight()


@dataclass
class InjectionPlan:
    lora_sites: list[str]
    skip_sites: list[str]
    skip_loss_excluded: frozenset = frozenset({"token"})

    def sites(self) -> list[tuple[str, str]]:
        return [(s, "lora") for s in self.lora_sites] + [(s, "skip") for s in self.skip_sites]


def default_plan(model, min_width: int = 64, use_lora=True, use_skip=True) -> InjectionPlan:
    """LoRA on the new ridge head and every backbone/head linear layer at least ``min_width`` wide on both sides;
    Skip-LoRA into the alignment layer, each residual block and the token layer."""
    lora = []
    if use_lora:
        for site, (d_in, d_out) in linear_site_shapes(model).items():
            if min(d_in, d_out) >= min_width:
                lora.append(site)
    skip = list(model.backbone.layer_names()) if use_skip else []
    return InjectionPlan(lora, skip)


def linear_site_shapes(model, n_voxels=None) -> dict[str, tuple[int, int]]:
    """(d_in, d_out) of every adaptable linear layer; ``ridge`` uses the new subject's voxel count."""
    shapes = {}
    if n_voxels is not None:
        shapes["ridge"] = (n_voxels, model.backbone.d0)
    for site, lin in {**model.backbone.linear_sites(), **model.heads.linear_sites()}.items():
        shapes[site] = (lin.d_in, lin.d_out)
    return shapes


@dataclass
class AdapterSet:
    subject_id: int
    n_voxels: int
    lora: dict[str, LoRABlock] = field(default_factory=dict)
    skip: dict[str, SkipLoRABlock] = field(default_factory=dict)
    skip_loss_excluded: frozenset = frozenset({"token"})

    def lora_delta(self, site, x):
        block = self.lora.get(site)
        return None if block is None else lora_forward(x, block)

    def skip_term(self, layer, V):
        block = self.skip.get(layer)
        return None if block is None else skip_lora_forward(V, block)

    def parameters(self) -> dict[str, Tensor]:
        p = {}
        for site, blk in self.lora.items():
            p[f"lora.{site}.A"] = blk.A
            p[f"lora.{site}.B"] = blk.B
        for layer, blk in self.skip.items():
            p[f"skip.{layer}.A"] = blk.lora.A
            p[f"skip.{layer}.B"] = blk.lora.B
        return p

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters().values())


def inject_adapters(model, plan: InjectionPlan, rank: int, rng, n_voxels: int, subject_id: int,
                    alpha: float = 8.0, activation: str = "tanh", dtype=np.float32) -> AdapterSet:
    """Fresh adapters (A = 0) for a new subject; the base model is not modified.

    The ``ridge`` site, when planned, adapts the new subject's ridge head.
    """
    for kind, sites in (("LoRA", plan.lora_sites), ("Skip-LoRA", plan.skip_sites)):
        dup = {s for s in sites if sites.count(s) > 1}
        if dup:
            raise ValueError(f"duplicate {kind} sites: {sorted(dup)}")
    shapes = linear_site_shapes(model, n_voxels)
    layers = dict(zip(model.backbone.layer_names(), model.backbone.layer_widths()))
    out = AdapterSet(subject_id, n_voxels, skip_loss_excluded=frozenset(plan.skip_loss_excluded))
    for site in plan.lora_sites:
        if site not in shapes:
            raise KeyError(f"no linear layer named {site!r}")
        d_in, d_out = shapes[site]
        out.lora[site] = make_lora(d_in, d_out, rank, alpha, rng, dtype)
    for layer in plan.skip_sites:
        if layer not in layers:
            raise KeyError(f"no backbone layer named {layer!r}")
        out.skip[layer] = SkipLoRABlock(make_lora(n_voxels, layers[layer], rank, alpha, rng, dtype), activation)
    return out
