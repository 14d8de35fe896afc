"""Loss terms: variational IB bound, CLUB upper bound, t-magnitude penalty.

The weighting convention used throughout is::

    total = nll + (1/lam) * kl + w_club * club + w_t * t_pen

``lam = inf`` switches the KL term off. The robust total has the same form,
with ``nll`` evaluated at the attacked z' and ``club`` at the attacked z_bar'.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import BatchSizeError, DivergenceError, ShapeError
from .tensor import Tensor

LOG_FIELDS = ("epoch", "nll", "kl", "club", "t_pen", "total_standard", "total_robust", "lambda")


@dataclass
class LossWeights:
    lam: float = 100.0
    w_club: float = 1.0
    w_t: float = 1.0

    @property
    def kl_weight(self) -> float:
        return 0.0 if math.isinf(self.lam) else 1.0 / self.lam


@dataclass
class LossBreakdown:
    nll: float
    kl: float
    club: float
    t_pen: float
    total_standard: float
    total_robust: float
    lam: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for k, v in asdict(self).items() if k != "lam")

    def as_row(self, epoch: int) -> list:
        return [epoch, self.nll, self.kl, self.club, self.t_pen,
                self.total_standard, self.total_robust, self.lam]

    @staticmethod
    def average(items: list["LossBreakdown"], weights=None) -> "LossBreakdown":
        w = np.ones(len(items)) if weights is None else np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        fields = ("nll", "kl", "club", "t_pen", "total_standard", "total_robust")
        vals = {f: float(np.dot(w, [getattr(b, f) for b in items])) for f in fields}
        return LossBreakdown(**vals, lam=items[0].lam)


def kl_to_prior(mu: Tensor, logvar: Tensor, prior_mean: np.ndarray) -> Tensor:
    """Batch mean of KL(N(mu, diag e^logvar) || N(m, I))."""
    if mu.shape != logvar.shape or mu.shape != np.shape(prior_mean):
        raise ShapeError(f"KL shapes differ: mu {mu.shape}, logvar {logvar.shape}, prior {np.shape(prior_mean)}")
    diff = T.sub(mu, prior_mean)
    per = T.sub(T.sub(T.add(T.exp(logvar), T.square(diff)), 1.0), logvar)
    return T.mul(T.mean(T.sum(per, axis=1)), 0.5)


def vib_bound(mu: Tensor, logvar: Tensor, z: Tensor, y, prior, predict_fn: Callable[[Tensor], Tensor]):
    """(nll, kl): cross-entropy of g(z) against y and the closed-form KL to the prior."""
    y = np.asarray(y, dtype=np.int64)
    if z.shape != mu.shape or len(y) != mu.shape[0]:
        raise ShapeError(f"vib_bound shape mismatch: z {z.shape}, mu {mu.shape}, y {y.shape}")
    nll = T.softmax_cross_entropy(predict_fn(z), y)
    kl = kl_to_prior(mu, logvar, prior.mean(y, mu.shape[1]))
    return nll, kl


def marginal_permutation(n: int, rng: Optional[np.random.Generator] = None, mode: str = "random") -> np.ndarray:
    if mode == "shift":
        return np.roll(np.arange(n), 1)
    if rng is None:
        raise ValueError("random permutation needs an rng")
    return rng.permutation(n)


def club_upper(z_bar: Tensor, y, predict_fn: Callable[[Tensor], Tensor], perm: np.ndarray) -> Tensor:
    """CLUB estimate of I(Z_bar; Y) with log p(y|z_bar) from the predictor.

    mean_i log p(y_i|z_bar_i) - mean_i log p(y_perm(i)|z_bar_i).
    """
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n < 2:
        raise BatchSizeError(f"CLUB needs at least 2 samples, got {n}")
    logp = T.log_softmax(predict_fn(z_bar))
    positive = T.mean(T.pick(logp, y))
    negative = T.mean(T.pick(logp, y[np.asarray(perm)]))
    return T.sub(positive, negative)


def t_constraint(t: Tensor, b: float = 0.8) -> Tensor:
    """Mean over batch and components of (t^2 - b)^2."""
    return T.mean(T.square(T.sub(T.square(t), b)))


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _assemble(nll, kl, club, t_pen, weights: LossWeights):
    parts = {"nll": nll, "kl": kl, "club": club, "t_pen": t_pen}
    vals = {k: _value(v) for k, v in parts.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        bd = LossBreakdown(**vals, total_standard=math.nan, total_robust=math.nan, lam=weights.lam)
        raise DivergenceError(f"non-finite loss term: {vals}", bd)
    total = nll
    # zero-weighted terms are left out of the graph entirely
    for term, w in ((kl, weights.kl_weight), (club, weights.w_club), (t_pen, weights.w_t)):
        if w != 0.0:
            total = total + w * term
    return total


def assemble_standard(nll, kl, club, t_pen, weights: LossWeights):
    """Total at the clean representations. Accepts Tensors or floats."""
    return _assemble(nll, kl, club, t_pen, weights)


def assemble_robust(nll_adv, kl, club_adv, t_pen, weights: LossWeights):
    """Same form as the standard total, fed with terms evaluated at (z', z_bar')."""
    return _assemble(nll_adv, kl, club_adv, t_pen, weights)


def _mean_ce(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def label_entropy(y) -> float:
    _, counts = np.unique(np.asarray(y), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def intervention_effect(z, z_bar, y, predictor) -> float:
    """Monitor for I(Z;Y) - I(Z_bar;Y) with I(.;Y) ~ H(Y) - CE(g(.), y).

    ``predictor`` is a ModelState, PredictorState, or any callable mapping an
    (n, z_dim) array to (n, 2) logits.
    """
    from .model import predict

    y = np.asarray(y, dtype=np.int64)
    fn = predictor if callable(predictor) else (lambda a: predict(predictor, a))
    h = label_entropy(y)
    i_z = h - _mean_ce(np.atleast_2d(fn(np.asarray(z))), y)
    i_zbar = h - _mean_ce(np.atleast_2d(fn(np.asarray(z_bar))), y)
    return i_z - i_zbar
