"""Synthetic causal system with parents, non-descendants and descendants of Y.

Per sample::

    pa  ~ U(-1, 1)^d1
    eps ~ N(0.3, beta I)                     (one draw shared by all branches)
    nd1 = A1 k1(k2([pa, eps])) + q           nd2 = A1 k3(k2([-pa, -eps])) + q
    nd  = sigmoid(nd1 + nd1 * nd2)
    y1, y2 as above with A2;  y = 1[mean(sigmoid(y1 + y1 * y2)) > 0.5]
    dc1 = A3 k1(k2([y, eps])) + q            dc2 = A3 k3(k2([-y, -eps])) + q
    dc  = sigmoid(dc1 + dc1 * dc2)
    x   = [pa, nd, dc]

Note that k3(k2(.)) is identically zero (k2 is non-negative, k3 only fires on
negative input), so every ``*2`` branch collapses to the offset q.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError

# chosen so P(y=1) stays near 0.7 for beta in [0, 1]; the +q offset biases labels upward
DEFAULT_MIXING_SEED = 189


def kappa1(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x - 0.5, 0.0)


def kappa2(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, 0.0)


def kappa3(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, x + 0.5, 0.0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class ScmConfig:
    n: int = 500
    beta: float = 0.3
    q: float = 0.3
    b_dims: tuple = (5, 5, 5)
    seed: int = 0
    mixing_seed: int = DEFAULT_MIXING_SEED
    noise_mean: float = 0.3
    # "sigmoid": mean(sigmoid(v)) > 0.5 ; "logit": mean(v) > 0
    label_threshold: str = "sigmoid"

    def __post_init__(self):
        self.b_dims = tuple(int(d) for d in self.b_dims)
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta (noise variance) must be >= 0")
        if len(self.b_dims) != 3 or min(self.b_dims) < 1:
            raise ConfigError("b_dims must be three positive integers")
        if self.label_threshold not in ("sigmoid", "logit"):
            raise ConfigError(f"label_threshold must be 'sigmoid' or 'logit', got {self.label_threshold!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["b_dims"] = list(self.b_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScmConfig":
        return cls(**d)


@dataclass(frozen=True)
class Mixing:
    """Frozen mixing matrices. A1: d2 x 2d1, A2: d1 x 2d1, A3: d3 x (1+d1)."""

    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray


def mixing_matrices(cfg: ScmConfig) -> Mixing:
    d1, d2, d3 = cfg.b_dims
    rng = np.random.default_rng(cfg.mixing_seed)
    return Mixing(
        A1=rng.standard_normal((d2, 2 * d1)),
        A2=rng.standard_normal((d1, 2 * d1)),
        A3=rng.standard_normal((d3, 1 + d1)),
    )


def draw_exogenous(cfg: ScmConfig, index: int):
    """(pa, eps) for sample ``index``; the stream depends only on (seed, index)."""
    d1 = cfg.b_dims[0]
    rng = np.random.default_rng([cfg.seed, index])
    pa = rng.uniform(-1.0, 1.0, d1)
    eps = cfg.noise_mean + np.sqrt(cfg.beta) * rng.standard_normal(d1)
    return pa, eps


def _branch(A, u, q):
    v1 = A @ kappa1(kappa2(u)) + q
    v2 = A @ kappa3(kappa2(-u)) + q
    return v1 + v1 * v2


def nd_from(pa, eps, mix: Mixing, q: float):
    return _sigmoid(_branch(mix.A1, np.concatenate([pa, eps]), q))


def label_from(pa, eps, mix: Mixing, q: float, threshold: str = "sigmoid") -> int:
    v = _branch(mix.A2, np.concatenate([pa, eps]), q)
    if threshold == "sigmoid":
        return int(np.mean(_sigmoid(v)) > 0.5)
    return int(np.mean(v) > 0)


def dc_from(y: int, eps, mix: Mixing, q: float):
    return _sigmoid(_branch(mix.A3, np.concatenate([[float(y)], eps]), q))


def generate_sample(cfg: ScmConfig, index: int, mix: Optional[Mixing] = None):
    """Return ``(pa, nd, dc, y, eps)`` for one sample."""
    mix = mix or mixing_matrices(cfg)
    pa, eps = draw_exogenous(cfg, index)
    nd = nd_from(pa, eps, mix, cfg.q)
    y = label_from(pa, eps, mix, cfg.q, cfg.label_threshold)
    dc = dc_from(y, eps, mix, cfg.q)
    return pa, nd, dc, y, eps


def generate(cfg: ScmConfig, start: int = 0, return_noise: bool = False):
    """Generate ``cfg.n`` samples with indices ``start .. start+n-1``."""
    mix = mixing_matrices(cfg)
    d1, d2, d3 = cfg.b_dims
    pa = np.empty((cfg.n, d1))
    eps = np.empty((cfg.n, d1))
    nd = np.empty((cfg.n, d2))
    dc = np.empty((cfg.n, d3))
    y = np.empty(cfg.n, dtype=np.int64)
    # per-sample loop keeps regeneration from stored (pa, eps, y) bit-exact
    for i in range(cfg.n):
        pa[i], nd[i], dc[i], y[i], eps[i] = generate_sample(cfg, start + i, mix)

    ds = Dataset(
        x=np.concatenate([pa, nd, dc], axis=1), y=y, pa=pa, nd=nd, dc=dc,
        meta={"encoder_path": "mlp", "schema": "factor", "scm": cfg.to_dict()},
    )
    if return_noise:
        return ds, eps
    return ds

