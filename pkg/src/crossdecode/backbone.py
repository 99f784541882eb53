"""Shared MLP backbone with residual blocks and tokenization, output heads, and the pivot projector.

Linear layers store ``W`` as (out, in) and act on row batches: ``y = x W^T + b``.
Every layer has a dotted site name (``backbone.input``, ``backbone.block2.fc1``,
``heads.prior_fc2``, ...) which adapters use to attach themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor
from .numerics import tape as T


@dataclass
class Linear:
    W: Tensor
    b: Tensor | None = None

    @property
    def d_in(self) -> int:
        return self.W.shape[1]

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    def __call__(self, x, delta: Tensor | None = None) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"linear layer expects {self.d_in} inputs, got {x.shape[-1]}")
        y = x @ T.transpose(self.W)
        if self.b is not None:
            y = y + self.b
        if delta is not None:
            y = y + delta
        return y


def init_linear(rng, d_in, d_out, bias=True, dtype=np.float32) -> Linear:
    bound = 1.0 / np.sqrt(d_in)
    W = Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)).astype(dtype))
    b = Tensor(rng.uniform(-bound, bound, size=d_out).astype(dtype)) if bias else None
    return Linear(W, b)


@dataclass
class ResidualBlock:
    ln_gamma: Tensor
    ln_beta: Tensor
    fc1: Linear
    fc2: Linear


@dataclass
class BackboneModel:
    input: Linear                 # d0 -> hidden
    blocks: list[ResidualBlock]   # 4 x (LN -> fc1 -> GELU -> fc2, residual)
    token: Linear                 # hidden -> T*D
    n_tokens: int
    token_dim: int

    @property
    def d0(self) -> int:
        return self.input.d_in

    @property
    def hidden(self) -> int:
        return self.input.d_out

    def linear_sites(self) -> dict[str, Linear]:
        sites = {"backbone.input": self.input}
        for i, blk in enumerate(self.blocks):
            sites[f"backbone.block{i}.fc1"] = blk.fc1
            sites[f"backbone.block{i}.fc2"] = blk.fc2
        sites["backbone.token"] = self.token
        return sites

    def layer_names(self) -> list[str]:
        """Names of the layers whose outputs form the per-layer activation list (skip sites)."""
        return ["input"] + [f"block{i}" for i in range(len(self.blocks))] + ["token"]

    def layer_widths(self) -> list[int]:
        return [self.hidden] * (1 + len(self.blocks)) + [self.n_tokens * self.token_dim]

    def parameters(self) -> dict[str, Tensor]:
        p = {}
        for name, lin in self.linear_sites().items():
            p[f"{name}.W"] = lin.W
            if lin.b is not None:
                p[f"{name}.b"] = lin.b
        for i, blk in enumerate(self.blocks):
            p[f"backbone.block{i}.ln_gamma"] = blk.ln_gamma
            p[f"backbone.block{i}.ln_beta"] = blk.ln_beta
        return p


@dataclass
class HeadSet:
    retrieval: Linear        # D -> D on mean-pooled tokens
    low_fc: Linear           # T*D -> (h/2 * w/2 * c_low)
    low_ref1: Linear         # c_low -> refiner_hidden, per grid position
    low_ref2: Linear         # refiner_hidden -> channels
    prior_fc1: Linear        # D -> prior_hidden, per token
    prior_fc2: Linear        # prior_hidden -> D
    upsample: np.ndarray     # (h*w, h/2*w/2) constant nearest-neighbour map
    grid: tuple[int, int, int]
    low_channels: int

    def linear_sites(self) -> dict[str, Linear]:
        return {f"heads.{k}": getattr(self, k)
                for k in ("retrieval", "low_fc", "low_ref1", "low_ref2", "prior_fc1", "prior_fc2")}

    def parameters(self) -> dict[str, Tensor]:
        p = {}
        for name, lin in self.linear_sites().items():
            p[f"{name}.W"] = lin.W
            if lin.b is not None:
                p[f"{name}.b"] = lin.b
        return p

    @property
    def lowlevel_dim(self) -> int:
        h, w, c = self.grid
        return h * w * c


@dataclass
class AdaptiveProjector:
    weight: Tensor   # (D_t, D)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"projector.W": self.weight}

    def copy(self) -> "AdaptiveProjector":
        return AdaptiveProjector(Tensor(self.weight.data.copy()))


@dataclass
class BackboneOutput:
    tokens: Tensor                          # (B, T, D)
    linear: list[Tensor] = field(default_factory=list)   # M_{h-linear} per layer
    skip: list[Tensor | None] = field(default_factory=list)  # M_{h-skip} per layer
    names: list[str] = field(default_factory=list)


def nearest_upsample(h, w) -> np.ndarray:
    """(h*w, h/2*w/2) matrix copying each coarse cell into its 2x2 fine block."""
    if h % 2 or w % 2:
        raise ValueError("low-level grid height and width must be even")
    hc, wc = h // 2, w // 2
    U = np.zeros((h * w, hc * wc))
    for i in range(h):
        for j in range(w):
            U[i * w + j, (i // 2) * wc + j // 2] = 1.0
    return U


def init_backbone(rng, d0, hidden, n_blocks, n_tokens, token_dim, dtype=np.float32) -> BackboneModel:
    blocks = [ResidualBlock(Tensor(np.ones(hidden, dtype=dtype)), Tensor(np.zeros(hidden, dtype=dtype)),
                            init_linear(rng, hidden, hidden, dtype=dtype), init_linear(rng, hidden, hidden, dtype=dtype))
              for _ in range(n_blocks)]
    return BackboneModel(init_linear(rng, d0, hidden, dtype=dtype), blocks,
                         init_linear(rng, hidden, n_tokens * token_dim, dtype=dtype), n_tokens, token_dim)


def init_heads(rng, n_tokens, token_dim, grid, low_channels, refiner_hidden, prior_hidden,
               dtype=np.float32) -> HeadSet:
    h, w, c = grid
    coarse = (h // 2) * (w // 2)
    return HeadSet(
        retrieval=init_linear(rng, token_dim, token_dim, dtype=dtype),
        low_fc=init_linear(rng, n_tokens * token_dim, coarse * low_channels, dtype=dtype),
        low_ref1=init_linear(rng, low_channels, refiner_hidden, dtype=dtype),
        low_ref2=init_linear(rng, refiner_hidden, c, dtype=dtype),
        prior_fc1=init_linear(rng, token_dim, prior_hidden, dtype=dtype),
        prior_fc2=init_linear(rng, prior_hidden, token_dim, dtype=dtype),
        upsample=nearest_upsample(h, w).astype(dtype),
        grid=tuple(grid),
        low_channels=low_channels,
    )


def init_projector(rng, token_dim, text_dim, dtype=np.float32) -> AdaptiveProjector:
    return AdaptiveProjector(Tensor(rng.normal(0.0, 1.0 / np.sqrt(token_dim), size=(text_dim, token_dim)).astype(dtype)))


def _delta(adapters, site, x):
    if adapters is None:
        return None
    return adapters.lora_delta(site, x)


def backbone_forward(M, backbone: BackboneModel, adapters=None, V=None) -> BackboneOutput:
    """Run the backbone; with adapters each layer adds its LoRA delta and its Skip-LoRA term from ``V``."""
    M = T.as_tensor(M)
    if M.shape[-1] != backbone.d0:
        raise ValueError(f"shared latent has {M.shape[-1]} entries, backbone expects {backbone.d0}")
    if adapters is not None and adapters.skip and V is None:
        raise ValueError("Skip-LoRA adapters need the raw voxels V")
    out = BackboneOutput(tokens=None)

    def layer(name, lin_out):
        skip = adapters.skip_term(name, V) if adapters is not None else None
        out.names.append(name)
        out.linear.append(lin_out)
        out.skip.append(skip)
        return lin_out if skip is None else lin_out + skip

    x = layer("input", backbone.input(M, _delta(adapters, "backbone.input", M)))
    for i, blk in enumerate(backbone.blocks):
        site = f"backbone.block{i}"
        hdn = T.layer_norm(x, blk.ln_gamma, blk.ln_beta)
        hdn = T.gelu(blk.fc1(hdn, _delta(adapters, site + ".fc1", hdn)))
        x = layer(f"block{i}", x + blk.fc2(hdn, _delta(adapters, site + ".fc2", hdn)))
    flat = layer("token", backbone.token(x, _delta(adapters, "backbone.token", x)))
    out.tokens = T.reshape(flat, flat.shape[:-1] + (backbone.n_tokens, backbone.token_dim))
    return out


def heads_forward(Z, heads: HeadSet, adapters=None):
    """Returns (unit retrieval embedding e (B, D), low-level latent (B, z_dim), prior tokens (B, T, D))."""
    Z = T.as_tensor(Z)
    if Z.ndim != 3 or Z.shape[-1] != heads.retrieval.d_in:
        raise ValueError(f"tokens must be (batch, T, {heads.retrieval.d_in}), got {Z.shape}")
    B, n_tok, D = Z.shape

    pooled = T.mean(Z, axis=1)
    e = T.l2_normalize(heads.retrieval(pooled, _delta(adapters, "heads.retrieval", pooled)))

    flat = T.reshape(Z, (B, n_tok * D))
    coarse = heads.low_fc(flat, _delta(adapters, "heads.low_fc", flat))
    coarse = T.reshape(coarse, (B, heads.upsample.shape[1], heads.low_channels))
    fine = Tensor(heads.upsample) @ coarse                     # (B, h*w, c_low)
    r = T.gelu(heads.low_ref1(fine, _delta(adapters, "heads.low_ref1", fine)))
    z = heads.low_ref2(r, _delta(adapters, "heads.low_ref2", r))  # (B, h*w, channels)
    z = T.reshape(z, (B, heads.lowlevel_dim))

    hdn = T.gelu(heads.prior_fc1(Z, _delta(adapters, "heads.prior_fc1", Z)))
    g = Z + heads.prior_fc2(hdn, _delta(adapters, "heads.prior_fc2", hdn))
    return e, z, g


def project_pivot(g_tokens, projector: AdaptiveProjector) -> Tensor:
    """Mean-pool tokens then project linearly into text space (no nonlinearity)."""
    g_tokens = T.as_tensor(g_tokens)
    if g_tokens.shape[-1] != projector.weight.shape[1]:
        raise ValueError(f"token width {g_tokens.shape[-1]} does not match projector input {projector.weight.shape[1]}")
    if g_tokens.ndim < 2:
        raise ValueError("project_pivot expects a token grid (T, D) or a batch (B, T, D)")
    return T.mean(g_tokens, axis=-2) @ T.transpose(projector.weight)
