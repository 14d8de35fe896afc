"""Projected gradient search for worst-case representations inside a norm ball.

For point masses the p-Wasserstein ball around z is the ordinary norm ball, so
the search runs plain PGD on z in L2 or L-infinity.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

NORMS = ("2", "inf")
DIRECTIONS = ("minimize-MI", "maximize-MI")


@dataclass
class AttackConfig:
    norm: str = "inf"
    beta: float = 0.3
    steps: int = 10
    step_size: Optional[float] = None
    direction: str = "minimize-MI"
    random_start: bool = False

    def __post_init__(self):
        self.norm = str(self.norm)
        if self.norm in ("infinity", "Linf", "linf"):
            self.norm = "inf"
        if self.norm not in NORMS:
            raise ConfigError(f"attack norm must be one of {NORMS}, got {self.norm!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"attack direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.beta < 0:
            raise ConfigError("attack beta must be >= 0")
        if self.steps < 1:
            raise ConfigError("pgd steps must be >= 1")
        if self.step_size is not None and self.beta > 0 and self.step_size <= 0:
            raise ConfigError("pgd step size must be > 0")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.beta / self.steps

    def with_(self, **kw) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def project(z: np.ndarray, z0: np.ndarray, beta: float, norm: str) -> np.ndarray:
    """Nearest point of the per-row ``norm`` ball of radius beta around z0."""
    delta = z - z0
    if norm == "inf":
        return z0 + np.clip(delta, -beta, beta)
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.minimum(1.0, beta / np.maximum(norms, 1e-300))
    out = z0 + delta * scale
    # rescaling can overshoot by an ulp; pull such rows back inside
    over = np.linalg.norm(out - z0, axis=-1, keepdims=True) > beta
    if np.any(over):
        out = np.where(over, z0 + delta * scale * (1 - 1e-15), out)
    return out


def _direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "inf":
        return np.sign(grad)
    n = np.linalg.norm(grad, axis=-1, keepdims=True)
    return np.where(n > 0, grad / np.where(n > 0, n, 1.0), 0.0)


def _eval(loss_fn, z: np.ndarray, sign: float):
    tape = Tape()
    leaf = tape.leaf(z)
    loss = loss_fn(leaf)
    objective = T.mul(T.sum(loss), sign)
    T.backward(tape, objective)
    return sign * np.atleast_1d(loss.data).astype(np.float64), leaf.grad


def pgd(z0, loss_fn: Callable[[Tensor], Tensor], cfg: AttackConfig,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Run PGD on a detached copy of ``z0`` and return the most adversarial iterate.

    ``loss_fn`` maps a z Tensor to the cross-entropy, either per row (shape (n,))
    or as a scalar. minimize-MI ascends it, maximize-MI descends it. With a
    per-row loss the best iterate is tracked per row, which assumes rows do not
    interact inside ``loss_fn``.
    """
    z0 = np.array(z0, dtype=np.float64)
    if cfg.beta == 0:
        return z0.copy()
    sign = 1.0 if cfg.direction == "minimize-MI" else -1.0
    best = z0.copy()
    best_obj, grad = _eval(loss_fn, z0, sign)
    per_row = z0.ndim == 2 and best_obj.size == z0.shape[0]
    z = z0.copy()
    if cfg.random_start:
        if rng is None:
            raise ConfigError("random_start needs an rng")
        if cfg.norm == "inf":
            z = z0 + rng.uniform(-cfg.beta, cfg.beta, z0.shape)
        else:
            d = rng.standard_normal(z0.shape)
            d /= np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)
            r = cfg.beta * rng.uniform(0, 1, z0.shape[:-1] + (1,))
            z = project(z0 + d * r, z0, cfg.beta, cfg.norm)
        obj, grad = _eval(loss_fn, z, sign)
        best, best_obj = _keep_best(best, best_obj, z, obj, per_row)
    elif not np.any(grad):
        logger.info("pgd: zero gradient at the start point; returning it unchanged")
        return best
    for _ in range(cfg.steps):
        z = project(z + cfg.alpha * _direction(grad, cfg.norm), z0, cfg.beta, cfg.norm)
        obj, grad = _eval(loss_fn, z, sign)
        best, best_obj = _keep_best(best, best_obj, z, obj, per_row)
    return best


def _keep_best(best, best_obj, z, obj, per_row):
    if per_row:
        better = obj > best_obj
        best = best.copy()
        best[better] = z[better]
        return best, np.where(better, obj, best_obj)
    if obj[0] > best_obj[0]:
        return z.copy(), obj
    return best, best_obj


def cross_entropy_loss(predictor_state, y) -> Callable[[Tensor], Tensor]:
    """Per-row CE of the frozen predictor; parameters enter as tape constants."""
    from .model import PredictorState, ModelState, _bind

    ps: PredictorState = predictor_state.predictor if isinstance(predictor_state, ModelState) else predictor_state
    y = np.asarray(y, dtype=np.int64)

    def loss_fn(z: Tensor) -> Tensor:
        P = _bind(ps.params, z.tape, trainable=False)
        return T.softmax_cross_entropy(ps.forward(P, z), y, reduction="none")

    return loss_fn


def worst_case_pair(z, z_bar, model, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None):
    """(z', z_bar'): z' lowers I(Y; Z'), z_bar' raises I(Y; Z_bar'), each within its ball."""
    loss_fn = cross_entropy_loss(model, y)
    z_adv = pgd(z, loss_fn, cfg.with_(direction="minimize-MI"), rng)
    zb_adv = pgd(z_bar, loss_fn, cfg.with_(direction="maximize-MI"), rng)
    return z_adv, zb_adv
