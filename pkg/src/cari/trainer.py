"""Standard and robust (minimax) training loops with Adam."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attack import AttackConfig, worst_case_pair
from .data import Dataset
from .errors import ConfigError, DivergenceError
from .model import ModelState, encode, predict_proba, reparameterize
from .objective import (
    LossBreakdown,
    LossWeights,
    assemble_robust,
    assemble_standard,
    club_upper,
    kl_to_prior,
    marginal_permutation,
    t_constraint,
)
from .tensor import Tape

logger = logging.getLogger(__name__)

BATCH_SIZES = (64, 128, 256, 512, 1024)
LEARNING_RATES = (1e-1, 1e-2, 1e-3, 1e-4)

# independent RNG streams derived from the run seed
STREAM_SHUFFLE, STREAM_NOISE, STREAM_PERM, STREAM_ATTACK = 1, 2, 3, 4


@dataclass
class TrainConfig:
    mode: str = "standard"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-2
    lam: float = 100.0
    w_club: float = 1.0
    w_t: float = 1.0
    beta: float = 0.3
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0
    patience: int = 10
    alternate: bool = False
    permutation: str = "random"
    # False: g is a fixed variational conditional inside CLUB and learns from the likelihood only
    club_trains_predictor: bool = False
    # False: CLUB reaches phi only through t, z enters z_bar as a constant there
    club_trains_encoder: bool = False
    strict_grid: bool = False

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.mode not in ("standard", "robust"):
            raise ConfigError(f"mode must be 'standard' or 'robust', got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.strict_grid and (self.batch_size not in BATCH_SIZES or self.lr not in LEARNING_RATES):
            raise ConfigError(f"batch_size must be in {BATCH_SIZES} and lr in {LEARNING_RATES}")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0 (use inf to disable the KL term)")
        if self.permutation not in ("random", "shift"):
            raise ConfigError("permutation must be 'random' or 'shift'")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, w_club=self.w_club, w_t=self.w_t)

    @property
    def attack_cfg(self) -> AttackConfig:
        return self.attack.with_(beta=self.beta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, state)``.

    Only names present in ``grads`` are updated; the step counter advances once.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = dict(params)
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out, state


# ---------------------------------------------------------------- one step


def _frozen_predictor(model: ModelState, tape: Tape):
    ps = model.predictor
    P = {k: tape.constant(v) for k, v in ps.params.items()}
    return lambda z: ps.forward(P, z)


def forward_losses(model: ModelState, x, y, noise, cfg: TrainConfig, perm, attack_rng=None, tape=None):
    """Build the loss graph for one batch.

    Returns ``(tape, bound_model, total, breakdown)``; ``total`` is the robust
    objective in robust mode and the standard one otherwise.
    """
    tape = tape or Tape()
    bm = model.bind(tape, trainable=True)
    h = bm.featurize(x)
    mu, logvar = bm.encode(h)
    z = reparameterize(mu, logvar, tape.constant(noise))
    t = bm.transform(h)
    z_bar = T.add(z, t)

    weights = cfg.weights
    kl = kl_to_prior(mu, logvar, model.prior.mean(y, model.z_dim))
    t_pen = t_constraint(t, model.intervention.b)
    nll = T.softmax_cross_entropy(bm.predict(z), y)
    club_predict = bm.predict if cfg.club_trains_predictor else _frozen_predictor(model, tape)
    z_bar_club = z_bar if cfg.club_trains_encoder else T.add(tape.constant(z.data), t)
    club = club_upper(z_bar_club, y, club_predict, perm)
    total_std = assemble_standard(nll, kl, club, t_pen, weights)

    if cfg.mode == "robust":
        # inner search runs on its own tapes with the predictor frozen
        z_adv, zb_adv = worst_case_pair(z.data, z_bar.data, model, y, cfg.attack_cfg, attack_rng)
        z_p = T.add(z, z_adv - z.data)
        zb_p = T.add(z_bar_club, zb_adv - z_bar.data)
        nll_adv = T.softmax_cross_entropy(bm.predict(z_p), y)
        club_adv = club_upper(zb_p, y, club_predict, perm)
        total = assemble_robust(nll_adv, kl, club_adv, t_pen, weights)
        nll_rep, club_rep = nll_adv, club_adv
    else:
        total = total_std
        nll_rep, club_rep = nll, club

    bd = LossBreakdown(
        nll=float(nll_rep.data), kl=float(kl.data), club=float(club_rep.data), t_pen=float(t_pen.data),
        total_standard=float(total_std.data), total_robust=float(total.data), lam=cfg.lam,
    )
    if not bd.is_finite():
        raise DivergenceError(f"non-finite loss: {bd}", bd)
    return tape, bm, total, bd


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    val_auc: float


@dataclass
class TrainResult:
    model: ModelState
    log: list
    best_epoch: int
    best_val_auc: float
    final_model: Optional[ModelState] = None

    def rows(self) -> list:
        return [rec.loss.as_row(rec.epoch) for rec in self.log]


def _stream(seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng([seed, k])


def validation_auc(model: ModelState, ds: Dataset) -> float:
    from .metrics import auc

    mu, _ = encode(model, ds.x)
    scores = predict_proba(model, mu)[:, 1]
    try:
        return auc(scores, ds.y)
    except ValueError:
        return math.nan


def _update_groups(step: int, cfg: TrainConfig, names):
    if not cfg.alternate:
        return list(names)
    if step % 2 == 0:
        return [n for n in names if not n.startswith("ivn.")]
    return [n for n in names if n.startswith("ivn.")]


def train(cfg: TrainConfig, data: Dataset, model: ModelState, val: Optional[Dataset] = None) -> TrainResult:
    """Train ``model`` (a copy is made) and return the best-validation-AUC state.

    Without a validation set the final state is returned.
    """
    n = len(data)
    if n == 0:
        raise ConfigError("training set is empty")
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {n} training samples")
    if data.encoder_path == "mlp" and data.d_in != model.encoder.d_in:
        raise ConfigError(f"model expects d_in={model.encoder.d_in}, data has {data.d_in}")

    model = model.copy()
    rng_shuffle = _stream(cfg.seed, STREAM_SHUFFLE)
    rng_noise = _stream(cfg.seed, STREAM_NOISE)
    rng_perm = _stream(cfg.seed, STREAM_PERM)
    rng_attack = _stream(cfg.seed, STREAM_ATTACK)
    adam = AdamState()
    params = {k: v.copy() for k, v in model.named_params().items()}

    log, best, best_auc, best_epoch, since_best = [], model.copy(), -math.inf, 0, 0
    step = 0
    n_batches = n // cfg.batch_size  # last partial batch is dropped
    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(n)
        noise = rng_noise.standard_normal((n, model.z_dim))
        batch_losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            perm = marginal_permutation(len(idx), rng_perm, cfg.permutation)
            model.set_params(params)
            tape, bm, total, bd = forward_losses(model, data.x[idx], data.y[idx], noise[idx], cfg, perm, rng_attack)
            T.backward(tape, total)
            bound = bm.all_params()
            names = _update_groups(step, cfg, bound)
            grads = {k: bound[k].grad for k in names}
            params, adam = adam_step(params, grads, adam, cfg.lr)
            batch_losses.append(bd)
            step += 1
        model.set_params(params)
        ep_loss = LossBreakdown.average(batch_losses)
        v_auc = validation_auc(model, val) if val is not None else math.nan
        log.append(EpochRecord(epoch, ep_loss, v_auc))
        logger.debug("epoch %d nll=%.4f kl=%.4f club=%.4f val_auc=%.4f", epoch, ep_loss.nll, ep_loss.kl,
                     ep_loss.club, v_auc)
        if val is None:
            continue
        if v_auc > best_auc:
            best_auc, best_epoch, since_best = v_auc, epoch, 0
            best = model.copy()
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    if val is None:
        return TrainResult(model=model, log=log, best_epoch=log[-1].epoch, best_val_auc=math.nan,
                           final_model=model)
    return TrainResult(model=best, log=log, best_epoch=best_epoch, best_val_auc=best_auc, final_model=model)
