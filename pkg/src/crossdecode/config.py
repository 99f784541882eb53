"""Experiment configuration: nested dataclasses loaded from YAML/JSON, self-validating and hashable."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class CohortConfig:
    n_subjects: int = 8
    voxels_min: int = 1200
    voxels_max: int = 2000
    latent_dim: int = 32
    n_train: int = 3000
    n_test: int = 300
    n_categories: int = 80
    between_var: float = 0.8
    within_var: float = 0.2
    n_tokens: int = 16
    token_dim: int = 64
    text_dim: int = 48
    text_jitter: float = 0.1
    token_norm: str = "rms"
    lowlevel_grid: tuple[int, int, int] = (8, 8, 4)
    gamma: float = 4.0
    fingerprint_fraction: float = 0.25
    fingerprint_hidden: int = 64
    fingerprint_gain: float = 2.0
    noise_sigma: float = 3.0
    session_size: int = 750

    def validate(self):
        _check(self.n_subjects >= 2, "cohort needs at least 2 subjects")
        _check(0 < self.voxels_min <= self.voxels_max, "voxel range must be positive and ordered")
        _check(self.voxels_min >= self.latent_dim, "voxel count must be >= latent_dim")
        _check(self.latent_dim > 0 and self.n_train > 0 and self.n_test > 0, "dimensions must be positive")
        _check(self.n_categories >= 2, "need at least 2 categories")
        _check(self.between_var >= 0 and self.within_var >= 0, "variances must be non-negative")
        _check(self.gamma >= 0, "gamma must be non-negative")
        _check(self.noise_sigma >= 0, "noise_sigma must be non-negative")
        _check(0 <= self.fingerprint_fraction <= 1, "fingerprint_fraction must be in [0, 1]")
        _check(self.fingerprint_hidden > self.latent_dim, "fingerprint_hidden must exceed latent_dim")
        _check(self.token_norm in ("rms", "l2", "none"), f"unknown token_norm {self.token_norm!r}")
        _check(self.session_size > 0, "session_size must be positive")
        _check(len(self.lowlevel_grid) == 3, "lowlevel_grid is (height, width, channels)")

    @property
    def lowlevel_dim(self) -> int:
        h, w, c = self.lowlevel_grid
        return h * w * c


@dataclass
class ModelConfig:
    d0: int = 256
    hidden: int = 512
    n_blocks: int = 4
    lowlevel_channels: int = 16
    refiner_hidden: int = 32
    prior_hidden: int = 128
    nonlinear_head: str | None = None

    def validate(self):
        _check(self.d0 > 0 and self.hidden > 0, "model widths must be positive")
        _check(self.n_blocks == 4, "the backbone has exactly 4 residual blocks")
        _check(self.nonlinear_head in (None, "gelu", "relu", "tanh"), "unknown nonlinear_head activation")


@dataclass
class AdapterConfig:
    rank: int = 8
    lora_alpha: float = 8.0
    skip_activation: str = "tanh"
    use_lora: bool = True
    use_skip: bool = True
    lora_min_width: int = 64

    def validate(self):
        _check(self.rank >= 1, "rank must be >= 1")
        _check(self.skip_activation in ("tanh", "relu", "gelu"), "unknown skip activation")


@dataclass
class LossConfig:
    alphas: tuple[float, float, float, float] = (0.5, 1.0, 1.5, 0.5)
    tau: float = 0.05
    beta_params: tuple[float, float] = (0.15, 0.15)
    pivot_bidirectional: bool = False
    ridge_l2: float = 1e-4

    def validate(self):
        _check(len(self.alphas) == 4 and all(a >= 0 for a in self.alphas), "alphas must be 4 non-negative weights")
        _check(self.tau > 0, "tau must be positive")
        _check(all(b > 0 for b in self.beta_params), "Beta parameters must be positive")
        _check(self.ridge_l2 >= 0, "ridge_l2 must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 10
    pretrain_epochs: int = 150
    pretrain_batch_size: int = 32
    lr: float = 3e-4
    pretrain_lr: float = 3e-4
    weight_decay: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e3
    switch_fraction: float = 1.0 / 3.0
    grad_clip: float = 1.0
    projector_epochs: int = 20
    dtype: str = "float32"

    def validate(self):
        _check(self.epochs >= 1 and self.pretrain_epochs >= 1, "epochs must be >= 1")
        _check(self.batch_size >= 2 and self.pretrain_batch_size >= 2, "batch sizes must be >= 2")
        _check(self.lr > 0 and self.pretrain_lr > 0, "learning rates must be positive")
        _check(0 <= self.switch_fraction <= 1, "switch_fraction must be in [0, 1]")
        _check(0 < self.pct_start < 1, "pct_start must be in (0, 1)")
        _check(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")


@dataclass
class EvalConfig:
    pool_size: int = 300
    pool_repeats: int = 30
    blend_ratio: tuple[float, float] = (3.0, 1.0)
    decoder_l2: float = 1e-2

    def validate(self):
        _check(self.pool_size >= 2, "pool_size must be >= 2")
        _check(len(self.blend_ratio) == 2 and min(self.blend_ratio) >= 0 and sum(self.blend_ratio) > 0,
               "blend_ratio must be two non-negative weights")


@dataclass
class FingerprintConfig:
    observers: int = 10
    blocks: int = 2
    eccentricities: int = 5
    angles: int = 16
    trials_per_location: int = 4
    shared_sd: float = 0.46
    idio_linear_sd: float = 0.35
    idio_nonlinear_sd: float = 0.606
    motor_sd: float = 1.04

    def validate(self):
        _check(self.observers >= 2, "need at least 2 observers")
        _check(self.blocks >= 2, "need at least 2 blocks per observer")
        _check(self.trials_per_location >= 1, "need at least one trial per location")


@dataclass
class ExperimentConfig:
    cohort: CohortConfig = field(default_factory=CohortConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    adapters: AdapterConfig = field(default_factory=AdapterConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    fingerprint: FingerprintConfig = field(default_factory=FingerprintConfig)
    seed: int = 0
    new_subject: int = 1
    sessions: int = 1

    def validate(self) -> "ExperimentConfig":
        for sec in (self.cohort, self.model, self.adapters, self.loss, self.train, self.eval, self.fingerprint):
            sec.validate()
        _check(1 <= self.new_subject <= self.cohort.n_subjects, "new_subject must be a cohort subject id")
        _check(self.sessions >= 1, "sessions must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(train={"epochs": 5}, seed=3)``."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                d[k].update(v)
            else:
                d[k] = v
        return from_dict(d)


_SECTIONS = {
    "cohort": CohortConfig,
    "model": ModelConfig,
    "adapters": AdapterConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "fingerprint": FingerprintConfig,
}


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _build(cls, values: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        kwargs[k] = tuple(v) if isinstance(default, tuple) else v
    return cls(**kwargs)


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    unknown = set(d) - set(_SECTIONS) - {"seed", "new_subject", "sessions"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {name: _build(cls, d.get(name) or {}) for name, cls in _SECTIONS.items()}
    for k in ("seed", "new_subject", "sessions"):
        if k in d:
            kwargs[k] = int(d[k])
    return ExperimentConfig(**kwargs).validate()


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    text = Path(path).read_text()
    return from_dict(yaml.safe_load(text))


def dump_config(cfg: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True))


PRESETS = {
    # default cohort; backbone and schedules shrunk so five seeds of the ablation grid fit a desk CPU
    "acceptance": {
        "model": {"hidden": 256, "d0": 128},
        "train": {"pretrain_epochs": 4, "pretrain_batch_size": 64, "pretrain_lr": 1e-3, "epochs": 20},
    },
    # γ=0 noiseless: the decoding task is exactly linear
    "linear-smoke": {
        "cohort": {"n_subjects": 3, "voxels_min": 64, "voxels_max": 96, "latent_dim": 8, "n_train": 400,
                   "n_test": 100, "n_categories": 10, "gamma": 0.0, "noise_sigma": 0.0, "n_tokens": 4,
                   "token_dim": 16, "text_dim": 12, "session_size": 100, "lowlevel_grid": [4, 4, 2]},
        "model": {"d0": 32, "hidden": 64, "lowlevel_channels": 8, "refiner_hidden": 16, "prior_hidden": 32},
        "adapters": {"rank": 4, "lora_min_width": 16},
        "train": {"epochs": 10, "pretrain_epochs": 10, "batch_size": 10},
    },
}


def preset(name: str) -> ExperimentConfig:
    try:
        return from_dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
