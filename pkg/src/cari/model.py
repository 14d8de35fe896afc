"""Encoder, intervention network, predictor and the Gaussian prior.

Network code is written against a mapping of parameter name -> Tensor so the
same forward pass serves training (parameters as tape leaves) and frozen
evaluation (parameters as constants).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .tensor import Tape, Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
CHECKPOINT_FORMAT = "cari-checkpoint/1"


def _uniform_linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)


def _linear(P, prefix, h):
    return T.add(T.matmul(h, P[prefix + "W"]), P[prefix + "b"])


def _bind(params: Mapping[str, np.ndarray], tape: Tape, trainable: bool) -> dict:
    if trainable:
        return {k: tape.leaf(v) for k, v in params.items()}
    return {k: tape.constant(v) for k, v in params.items()}


@dataclass
class EncoderState:
    """q(z|x): input -> Linear+ELU -> Linear producing (mu, logvar).

    With ``embedding=(n_users, n_items)`` the input is an (n, 2) id array that
    is embedded and concatenated before the first linear layer.
    """

    params: dict
    d_in: int
    z_dim: int = 64
    hidden: int = 64
    embedding: Optional[tuple] = None
    emb_dim: int = 32

    @property
    def feature_dim(self) -> int:
        return 2 * self.emb_dim if self.embedding else self.d_in

    def featurize(self, P, x) -> Tensor:
        tape = next(iter(P.values())).tape
        if self.embedding:
            ids = np.asarray(x, dtype=np.int64)
            if ids.ndim != 2 or ids.shape[1] != 2:
                raise ShapeError(f"embedding encoder expects (n, 2) ids, got {ids.shape}")
            return T.concat([T.take_rows(P["user_emb"], ids[:, 0]), T.take_rows(P["item_emb"], ids[:, 1])])
        x = x if isinstance(x, Tensor) else tape.constant(np.atleast_2d(x))
        if x.shape[1] != self.d_in:
            raise ShapeError(f"encoder expects input dimension {self.d_in}, got {x.shape[1]}")
        return x

    def forward(self, P, h: Tensor):
        out = _linear(P, "2", T.elu(_linear(P, "1", h)))
        mu = T.slice_cols(out, 0, self.z_dim)
        logvar = T.clamp(T.slice_cols(out, self.z_dim, 2 * self.z_dim), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


@dataclass
class InterventionState:
    """Deterministic k: features -> t with the encoder's hidden sizing."""

    params: dict
    z_dim: int = 64
    hidden: int = 64
    b: float = 0.8

    def forward(self, P, h: Tensor) -> Tensor:
        return _linear(P, "2", T.elu(_linear(P, "1", h)))


@dataclass
class PredictorState:
    """g: z -> two class logits."""

    params: dict
    z_dim: int = 64
    hidden: int = 64

    def forward(self, P, z: Tensor) -> Tensor:
        if z.shape[-1] != self.z_dim:
            raise ShapeError(f"predictor expects z of length {self.z_dim}, got {z.shape[-1]}")
        return _linear(P, "2", T.elu(_linear(P, "1", z)))


@dataclass
class PriorConfig:
    """Standard N(0, I) or conditional N(zeta(y) 1, I) with zeta(y) = scale*y + shift."""

    kind: str = "conditional"
    zeta_scale: float = 1.0
    zeta_shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("standard", "conditional"):
            raise ValueError(f"prior kind must be 'standard' or 'conditional', got {self.kind!r}")

    def mean(self, y, z_dim: int) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        if self.kind == "standard":
            return np.zeros((len(y), z_dim))
        return np.repeat((self.zeta_scale * y + self.zeta_shift)[:, None], z_dim, axis=1)


@dataclass
class ModelState:
    encoder: EncoderState
    intervention: InterventionState
    predictor: PredictorState
    prior: PriorConfig = field(default_factory=PriorConfig)
    seed: int = 0

    _PARTS = (("enc.", "encoder"), ("ivn.", "intervention"), ("pred.", "predictor"))

    @property
    def z_dim(self) -> int:
        return self.encoder.z_dim

    def named_params(self) -> dict:
        """Flat, ordered parameter view (arrays are shared, not copied)."""
        out = {}
        for prefix, attr in self._PARTS:
            for k, v in getattr(self, attr).params.items():
                out[prefix + k] = v
        return out

    def set_params(self, flat: Mapping[str, np.ndarray]) -> None:
        for prefix, attr in self._PARTS:
            part = getattr(self, attr)
            for k in part.params:
                part.params[k] = np.array(flat[prefix + k], dtype=np.float64)

    def copy(self) -> "ModelState":
        clone = ModelState(
            encoder=EncoderState(**{**asdict_shallow(self.encoder), "params": _copy(self.encoder.params)}),
            intervention=InterventionState(**{**asdict_shallow(self.intervention),
                                              "params": _copy(self.intervention.params)}),
            predictor=PredictorState(**{**asdict_shallow(self.predictor), "params": _copy(self.predictor.params)}),
            prior=PriorConfig(**asdict(self.prior)),
            seed=self.seed,
        )
        return clone

    def bind(self, tape: Tape, trainable: bool = True) -> "BoundModel":
        return BoundModel(
            self,
            _bind(self.encoder.params, tape, trainable),
            _bind(self.intervention.params, tape, trainable),
            _bind(self.predictor.params, tape, trainable),
        )

    def config(self) -> dict:
        return {
            "d_in": self.encoder.d_in, "z_dim": self.z_dim, "hidden": self.encoder.hidden,
            "embedding": list(self.encoder.embedding) if self.encoder.embedding else None,
            "emb_dim": self.encoder.emb_dim, "b": self.intervention.b,
            "prior": asdict(self.prior), "seed": self.seed,
        }


def asdict_shallow(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


@dataclass
class BoundModel:
    """Model parameters placed on one tape."""

    state: ModelState
    enc: dict
    ivn: dict
    pred: dict

    def all_params(self) -> dict:
        out = {}
        for prefix, d in (("enc.", self.enc), ("ivn.", self.ivn), ("pred.", self.pred)):
            for k, v in d.items():
                out[prefix + k] = v
        return out

    def featurize(self, x) -> Tensor:
        return self.state.encoder.featurize(self.enc, x)

    def encode(self, h: Tensor):
        return self.state.encoder.forward(self.enc, h)

    def transform(self, h: Tensor) -> Tensor:
        return self.state.intervention.forward(self.ivn, h)

    def predict(self, z: Tensor) -> Tensor:
        return self.state.predictor.forward(self.pred, z)


def init_model(d_in: int, seed: int = 0, z_dim: int = 64, hidden: int = 64,
               embedding: Optional[tuple] = None, emb_dim: int = 32,
               prior: Optional[PriorConfig] = None, b: float = 0.8) -> ModelState:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; embeddings N(0, 0.1^2)."""
    rng = np.random.default_rng([seed, 0])
    feat = 2 * emb_dim if embedding else d_in
    enc, ivn, pred = {}, {}, {}
    if embedding:
        enc["user_emb"] = 0.1 * rng.standard_normal((int(embedding[0]), emb_dim))
        enc["item_emb"] = 0.1 * rng.standard_normal((int(embedding[1]), emb_dim))
    enc["1W"], enc["1b"] = _uniform_linear(rng, feat, hidden)
    enc["2W"], enc["2b"] = _uniform_linear(rng, hidden, 2 * z_dim)
    ivn["1W"], ivn["1b"] = _uniform_linear(rng, feat, hidden)
    ivn["2W"], ivn["2b"] = _uniform_linear(rng, hidden, z_dim)
    pred["1W"], pred["1b"] = _uniform_linear(rng, z_dim, hidden)
    pred["2W"], pred["2b"] = _uniform_linear(rng, hidden, 2)
    return ModelState(
        encoder=EncoderState(enc, d_in=d_in, z_dim=z_dim, hidden=hidden,
                             embedding=tuple(embedding) if embedding else None, emb_dim=emb_dim),
        intervention=InterventionState(ivn, z_dim=z_dim, hidden=hidden, b=b),
        predictor=PredictorState(pred, z_dim=z_dim, hidden=hidden),
        prior=prior or PriorConfig(),
        seed=seed,
    )


def model_for_dataset(ds, seed: int = 0, **kw) -> ModelState:
    if ds.encoder_path == "embedding":
        return init_model(2, seed=seed, embedding=(ds.meta["n_users"], ds.meta["n_items"]), **kw)
    return init_model(ds.d_in, seed=seed, **kw)


# ---------------------------------------------------------------- functional API


def reparameterize(mu, logvar, noise):
    """z = mu + exp(logvar / 2) * noise; works on Tensors or arrays."""
    if isinstance(mu, Tensor):
        return T.add(mu, T.mul(T.exp(T.mul(logvar, 0.5)), noise))
    mu, logvar, noise = (np.asarray(a, dtype=np.float64) for a in (mu, logvar, noise))
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeError(f"reparameterize shapes differ: {mu.shape}, {logvar.shape}, {noise.shape}")
    return mu + np.exp(0.5 * logvar) * noise


def encode(state: ModelState, x):
    """Posterior (mu, logvar) as arrays for a vector or batch ``x``."""
    tape = Tape()
    bm = state.bind(tape, trainable=False)
    mu, logvar = bm.encode(bm.featurize(x))
    return mu.numpy(), logvar.numpy()


def transformation(state: ModelState, x) -> np.ndarray:
    tape = Tape()
    bm = state.bind(tape, trainable=False)
    return bm.transform(bm.featurize(x)).numpy()


def intervene(state: ModelState, x, z, t=None):
    """Return ``(z_bar, t)`` with t = k(x) (or the supplied t) and z_bar = z + t.

    Tensor inputs yield Tensors; ``z`` itself is never modified.
    """
    if isinstance(z, Tensor):
        if t is None:
            raise ValueError("tensor mode needs t computed on the same tape")
        return T.add(z, t), t
    z = np.asarray(z, dtype=np.float64)
    if t is None:
        t = transformation(state, x)
    t = np.asarray(t, dtype=np.float64).reshape(z.shape)
    return z + t, t


def predict(state, z) -> np.ndarray:
    """Class logits for a vector (-> (2,)) or batch (-> (n, 2)) of representations.

    ``state`` may be a ModelState or a bare PredictorState.
    """
    pstate = state.predictor if isinstance(state, ModelState) else state
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    tape = Tape()
    P = _bind(pstate.params, tape, trainable=False)
    out = pstate.forward(P, tape.constant(np.atleast_2d(z))).numpy()
    return out[0] if single else out


def predict_proba(state, z) -> np.ndarray:
    logits = np.atleast_2d(predict(state, z))
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state: ModelState, directory, extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` (little-endian float64, manifest order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, arr in state.named_params().items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").reshape(-1))
    manifest = {"format": CHECKPOINT_FORMAT, "config": state.config(), "params": entries,
                "n_values": offset, "extra": extra or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (directory / "params.bin").write_bytes(blob.astype("<f8").tobytes())
    return directory


def load_checkpoint(directory):
    """Return ``(ModelState, manifest)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint at {directory}: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT or blob.size != manifest["n_values"]:
        raise DataError(f"{directory}: not a valid checkpoint")
    cfg = manifest["config"]
    state = init_model(cfg["d_in"], seed=cfg["seed"], z_dim=cfg["z_dim"], hidden=cfg["hidden"],
                       embedding=tuple(cfg["embedding"]) if cfg["embedding"] else None,
                       emb_dim=cfg["emb_dim"], prior=PriorConfig(**cfg["prior"]), b=cfg["b"])
    flat = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        flat[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    expected = state.named_params()
    if set(flat) != set(expected) or any(flat[k].shape != expected[k].shape for k in flat):
        raise DataError(f"{directory}: parameter layout does not match its config")
    state.set_params(flat)
    return state, manifest
