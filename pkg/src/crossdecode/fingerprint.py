"""Simulated position-matching experiment and distortion-index (DI) consistency fits.

Observers match briefly shown targets at a grid of eccentricities and polar
angles.  Each observer's perceived position is displaced radially by a
distortion field made of a component shared by everyone plus an
idiosyncratic part (a linear eccentricity trend and a location-wise
non-linear residue).  A block's DI at a location is the mean relative radial
error over its trials.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from .config import FingerprintConfig
from .numerics import make_rng, pearson


@dataclass
class FingerprintFit:
    beta_self: tuple[float, float]     # (intercept, slope) of DI_self ~ self
    beta_others: tuple[float, float]   # (intercept, slope) of DI_others ~ others
    r_within: float
    r_between: float
    di: np.ndarray                     # (observers, blocks, locations)
    eccentricity: np.ndarray           # (locations,)
    angle: np.ndarray                  # (locations,)

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("di", "eccentricity", "angle")}
        d["beta_self"] = list(self.beta_self)
        d["beta_others"] = list(self.beta_others)
        d["observers"], d["blocks"], d["locations"] = (int(n) for n in self.di.shape)
        return d


def linear_fit(x, y) -> tuple[float, float]:
    """Least-squares (intercept, slope) of y ~ b0 + b1 * x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return float(coef[0]), float(coef[1])


def simulate_di(cfg: FingerprintConfig, seed: int):
    """Returns DI array (observers, blocks, locations) plus location eccentricities and angles."""
    rng = make_rng(seed, "fingerprint")
    ecc_levels = np.linspace(1.0, 1.0 + 2.0 * (cfg.eccentricities - 1), cfg.eccentricities)
    ecc, ang = np.meshgrid(ecc_levels, np.linspace(0, 2 * np.pi, cfg.angles, endpoint=False), indexing="ij")
    ecc, ang = ecc.ravel(), ang.ravel()
    n_loc = ecc.size
    ecc_z = (ecc - ecc.mean()) / (ecc.std() or 1.0)

    shared = rng.normal(0.0, cfg.shared_sd, n_loc)
    di = np.empty((cfg.observers, cfg.blocks, n_loc))
    for o in range(cfg.observers):
        slope = rng.normal(0.0, cfg.idio_linear_sd)
        residue = rng.normal(0.0, cfg.idio_nonlinear_sd, n_loc)
        field = shared + slope * ecc_z + residue
        for b in range(cfg.blocks):
            # reported eccentricity = true * (1 + field) + motor noise, in units of the true eccentricity
            reports = ecc * (1.0 + field) + ecc * rng.normal(0.0, cfg.motor_sd, (cfg.trials_per_location, n_loc))
            di[o, b] = (reports / ecc - 1.0).mean(axis=0)
    return di, ecc, ang


def fit_distortion_indices(di: np.ndarray):
    """Pool within-observer (block vs block) and between-observer pairs; fit both linear models."""
    n_obs, n_blocks, _ = di.shape
    if n_blocks < 2:
        raise ValueError("within-subject correlation needs at least 2 blocks")
    if n_obs < 2:
        raise ValueError("between-subject correlation needs at least 2 observers")
    self_x, self_y, r_within = [], [], []
    for o in range(n_obs):
        for b1, b2 in combinations(range(n_blocks), 2):
            self_x.append(di[o, b1])
            self_y.append(di[o, b2])
            r_within.append(pearson(di[o, b1], di[o, b2]))
    oth_x, oth_y, r_between = [], [], []
    for o1, o2 in combinations(range(n_obs), 2):
        for b in range(n_blocks):
            oth_x.append(di[o1, b])
            oth_y.append(di[o2, b])
            r_between.append(pearson(di[o1, b], di[o2, b]))
    beta_self = linear_fit(np.concatenate(self_x), np.concatenate(self_y))
    beta_others = linear_fit(np.concatenate(oth_x), np.concatenate(oth_y))
    return beta_self, beta_others, float(np.mean(r_within)), float(np.mean(r_between))


def run_fingerprint_experiment(cfg: FingerprintConfig, seed: int) -> FingerprintFit:
    cfg.validate()
    di, ecc, ang = simulate_di(cfg, seed)
    beta_self, beta_others, r_w, r_b = fit_distortion_indices(di)
    return FingerprintFit(beta_self, beta_others, r_w, r_b, di, ecc, ang)
