"""Experiment driver: ``cari {gen-data,train,eval,scaling-check,sweep}``.

Configuration is JSON. Values resolve as flag > config file > default, and
every command writes the fully resolved configuration next to its outputs so
the run can be repeated from that file alone.
"""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .attack import AttackConfig
from .data import Dataset, load_rating_csv, read_factor_csv, split, write_factor_csv
from .errors import CariError, ConfigError, DataError, DivergenceError
from .metrics import append_metrics_csv, evaluate, representations, scaling_check
from .model import PriorConfig, load_checkpoint, model_for_dataset, save_checkpoint
from .objective import LOG_FIELDS
from .synthgen import ScmConfig, generate
from .trainer import TrainConfig, train

logger = logging.getLogger("cari")

METHODS = ("base", "ib", "r-cvae", "cari")
DATA_KINDS = ("factor", "id-rating", "feature-rating")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# (kl on, club on, t-constraint on, prior kind)
PRESETS = {
    "base": (False, False, False, "standard"),
    "ib": (True, False, False, "standard"),
    "r-cvae": (True, False, True, "conditional"),
    "cari": (True, True, True, "conditional"),
}


def _float(v) -> float:
    return float(v) if not isinstance(v, str) else float(v.strip().lower())


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)  # "inf" / "nan" keep the file plain JSON
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- configuration


@dataclass
class ExperimentConfig:
    method: str = "cari"
    seed: int = 0
    out: str = "runs/default"
    dataset: dict = field(default_factory=lambda: {"synthetic": {}})
    train: dict = field(default_factory=dict)
    eval: list = field(default_factory=lambda: [{"norm": "inf", "beta": 0.3}, {"norm": "2", "beta": 0.3}])
    model: dict = field(default_factory=lambda: {"z_dim": 64, "hidden": 64, "emb_dim": 32})
    split: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    cmi_bins: int = 4
    scaling: dict = field(default_factory=lambda: {"m_list": [100, 400, 1600, 6400], "seeds": 10,
                                                   "reference_m": 100_000, "cells": 16,
                                                   "representation": "model"})
    sweep: dict = field(default_factory=lambda: {"seeds": [0, 1, 2, 3, 4], "methods": ["base", "cari"],
                                                 "betas": [0.3], "mode": None, "workers": 2})

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not isinstance(self.dataset, dict) or len(self.dataset) != 1 or \
                next(iter(self.dataset)) not in ("synthetic", "csv"):
            raise ConfigError("dataset must have exactly one source: 'synthetic' or 'csv'")
        if "csv" in self.dataset:
            src = self.dataset["csv"]
            if not src.get("path"):
                raise ConfigError("csv dataset needs a 'path'")
            if src.get("kind", "factor") not in DATA_KINDS:
                raise ConfigError(f"csv kind must be one of {DATA_KINDS}")
        if not self.eval:
            raise ConfigError("eval needs at least one attack entry")
        # validate eagerly so errors surface before any compute
        self.train_config()
        self.attacks()
        if self.is_synthetic:
            self.scm_config()

    @property
    def is_synthetic(self) -> bool:
        return "synthetic" in self.dataset

    def scm_config(self) -> ScmConfig:
        d = dict(self.dataset["synthetic"])
        d["seed"] = self.seed
        try:
            return ScmConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic dataset config: {exc}") from None

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        kl_on, club_on, t_on, _ = PRESETS[self.method]
        lam = _float(d.get("lam", TrainConfig.lam))
        d["lam"] = lam if kl_on else math.inf
        d["w_club"] = float(d.get("w_club", 1.0)) if club_on else 0.0
        d["w_t"] = float(d.get("w_t", 1.0)) if t_on else 0.0
        d["seed"] = self.seed
        if "attack" in d and isinstance(d["attack"], dict):
            d["attack"] = AttackConfig(**d["attack"])
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None

    def prior(self) -> PriorConfig:
        return PriorConfig(kind=PRESETS[self.method][3])

    def attacks(self) -> list:
        try:
            return [AttackConfig(**a) for a in self.eval]
        except TypeError as exc:
            raise ConfigError(f"bad eval attack entry: {exc}") from None

    def resolved(self) -> dict:
        """Snapshot with presets applied; feeding it back reproduces the run."""
        tc = self.train_config().to_dict()
        tc.pop("seed")
        ds = copy.deepcopy(self.dataset)
        if self.is_synthetic:
            sc = self.scm_config().to_dict()
            sc.pop("seed")
            ds = {"synthetic": sc}
        return {"method": self.method, "seed": self.seed, "out": self.out, "dataset": ds, "train": tc,
                "eval": [a.to_dict() for a in self.attacks()], "model": dict(self.model),
                "split": list(self.split), "cmi_bins": self.cmi_bins, "scaling": dict(self.scaling),
                "sweep": dict(self.sweep)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        defaults = {k: f.default_factory() if callable(f.default_factory) else f.default
                    for k, f in cls.__dataclass_fields__.items()}
        merged = {**defaults, **copy.deepcopy(d)}
        for k in ("model", "scaling", "sweep"):
            merged[k] = {**defaults[k], **(d.get(k) or {})}
        return cls(**merged)


def load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return data


def apply_flags(d: dict, args: argparse.Namespace) -> dict:
    d = copy.deepcopy(d)
    train_d = dict(d.get("train") or {})
    attack_d = dict(train_d.get("attack") or {})
    for key in ("method", "seed", "out"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    if getattr(args, "mode", None) is not None:
        train_d["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        train_d["epochs"] = args.epochs
    if getattr(args, "beta", None) is not None:
        train_d["beta"] = args.beta
    for flag, key in (("attack_norm", "norm"), ("pgd_steps", "steps"), ("pgd_step_size", "step_size")):
        if getattr(args, flag, None) is not None:
            attack_d[key] = getattr(args, flag)
    if attack_d:
        train_d["attack"] = attack_d
    if train_d:
        d["train"] = train_d
    # attack flags also define the evaluation attack
    eval_flags = [getattr(args, f, None) for f in ("beta", "attack_norm", "pgd_steps", "pgd_step_size")]
    if any(v is not None for v in eval_flags):
        entries = d.get("eval") or ExperimentConfig().eval
        new = []
        for e in entries:
            e = dict(e)
            if args.beta is not None:
                e["beta"] = args.beta
            if args.pgd_steps is not None:
                e["steps"] = args.pgd_steps
            if args.pgd_step_size is not None:
                e["step_size"] = args.pgd_step_size
            new.append(e)
        if args.attack_norm is not None:
            new = [{**new[0], "norm": args.attack_norm}]
        d["eval"] = new
    if getattr(args, "data", None) is not None:
        d["dataset"] = {"csv": {"path": args.data, "kind": args.data_kind or "factor"}}
    if getattr(args, "n", None) is not None:
        src = d.setdefault("dataset", {"synthetic": {}})
        if "synthetic" not in src:
            raise ConfigError("--n only applies to the synthetic source")
        src["synthetic"]["n"] = args.n
    if getattr(args, "data_beta", None) is not None:
        src = d.setdefault("dataset", {"synthetic": {}})
        if "synthetic" not in src:
            raise ConfigError("--data-beta only applies to the synthetic source")
        src["synthetic"]["beta"] = args.data_beta
    return d


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    return ExperimentConfig.from_dict(apply_flags(load_config_file(args.config), args))


def _outdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {p} is not writable: {exc}") from None
    return p


# ---------------------------------------------------------------- data


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.is_synthetic:
        return generate(cfg.scm_config())
    src = cfg.dataset["csv"]
    path, kind = Path(src["path"]), src.get("kind", "factor")
    if not path.is_file():
        raise ConfigError(f"dataset file not found: {path}")
    if kind == "factor":
        return read_factor_csv(path)
    return load_rating_csv(path, kind, label_threshold=src.get("label_threshold"))


def dataset_splits(cfg: ExperimentConfig, ds: Dataset):
    return split(ds, tuple(cfg.split), cfg.seed)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    if not cfg.is_synthetic:
        raise ConfigError("gen-data needs the synthetic dataset source")
    out = _outdir(cfg.out)
    scm = cfg.scm_config()
    ds = generate(scm)
    path = out / "data.csv"
    try:
        write_factor_csv(ds, path)
        _dump(out / "data.json", scm.to_dict())
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None
    _dump(out / "config.json", cfg.resolved())
    logger.info("wrote %d rows to %s", len(ds), path)
    return path


def write_epoch_log(path: Path, rows: list) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r[0]] + [format(v, ".17g") for v in r[1:]])


def cmd_train(cfg: ExperimentConfig):
    tc = cfg.train_config()
    out = _outdir(cfg.out)
    ds = load_dataset(cfg)
    tr, va, _ = dataset_splits(cfg, ds)
    model = model_for_dataset(ds, seed=cfg.seed, prior=cfg.prior(), **cfg.model)
    _dump(out / "config.json", cfg.resolved())
    result = train(tc, tr, model, va)
    write_epoch_log(out / "epochs.csv", result.rows())
    save_checkpoint(result.model, out / "checkpoint",
                    extra={"method": cfg.method, "best_epoch": result.best_epoch,
                           "best_val_auc": _jsonable(result.best_val_auc),
                           "experiment": _jsonable(cfg.resolved())})
    summary = {"method": cfg.method, "mode": tc.mode, "seed": cfg.seed, "best_epoch": result.best_epoch,
               "best_val_auc": result.best_val_auc, "epochs_run": len(result.log)}
    _dump(out / "train_summary.json", summary)
    logger.info("trained %s/%s seed %d: best epoch %d, val AUC %.4f", cfg.method, tc.mode, cfg.seed,
                result.best_epoch, result.best_val_auc)
    return result


def cmd_eval(cfg: ExperimentConfig, checkpoint: Optional[str] = None):
    out = _outdir(cfg.out)
    ckpt = Path(checkpoint) if checkpoint else out / "checkpoint"
    model, manifest = load_checkpoint(ckpt)
    ds = load_dataset(cfg)
    _, _, te = dataset_splits(cfg, ds)
    if te.encoder_path != ("embedding" if model.encoder.embedding else "mlp"):
        raise DataError(f"checkpoint {ckpt} was trained for a different encoder path")
    if te.encoder_path == "mlp" and te.d_in != model.encoder.d_in:
        raise DataError(f"checkpoint {ckpt} expects d_in={model.encoder.d_in}, dataset has {te.d_in}")
    report = evaluate(model, te, cfg.attacks(), cmi_bins=cfg.cmi_bins)
    report.to_json(out / "metrics.json")
    mode = manifest.get("extra", {}).get("experiment", {}).get("train", {}).get("mode", cfg.train_config().mode)
    method = manifest.get("extra", {}).get("method", cfg.method)
    append_metrics_csv(out / "metrics.csv", report.csv_rows({"method": method, "mode": mode, "seed": cfg.seed}))
    return report


def _synthetic_sampler(scm: ScmConfig):
    def sample(n: int, seed: int) -> Dataset:
        return generate(ScmConfig.from_dict({**scm.to_dict(), "n": n, "seed": seed}))
    return sample


def cmd_scaling_check(cfg: ExperimentConfig, checkpoint: Optional[str] = None):
    """Plug-in MI gap of a learned representation versus sample size.

    Z is the posterior mean of a trained model: the given checkpoint, or one
    trained here from the configuration. ``scaling.representation = "pa"``
    uses the true parent block instead.
    """
    if not cfg.is_synthetic:
        raise ConfigError("scaling-check needs the synthetic dataset source")
    out = _outdir(cfg.out)
    sc = cfg.scaling
    kind = sc.get("representation", "model")
    if kind == "pa":
        rep = lambda ds: ds.pa  # noqa: E731
    elif kind == "model":
        if checkpoint is None:
            sub = ExperimentConfig.from_dict({**cfg.resolved(), "out": str(out / "model")})
            cmd_train(sub)
            checkpoint = out / "model" / "checkpoint"
        model, _ = load_checkpoint(checkpoint)
        rep = lambda ds: representations(model, ds)  # noqa: E731
    else:
        raise ConfigError(f"scaling.representation must be 'model' or 'pa', got {kind!r}")
    seeds = range(sc["seeds"]) if isinstance(sc["seeds"], int) else sc["seeds"]
    result = scaling_check(_synthetic_sampler(cfg.scm_config()), rep, sc["m_list"], seeds,
                           reference_m=sc["reference_m"], cells=sc["cells"])
    result.to_csv(out / "scaling.csv")
    _dump(out / "scaling_summary.json", result.summary())
    _dump(out / "config.json", cfg.resolved())
    return result


def _run_one(payload):
    """Worker body for ``sweep``: train then evaluate into a private directory."""
    d, mode = payload
    cfg = ExperimentConfig.from_dict(d)
    try:
        res = cmd_train(cfg)
        report = cmd_eval(cfg)
    except DivergenceError as exc:
        return d, mode, None, str(exc)
    return d, mode, (res.best_epoch, report.to_dict()), None


def sweep_payloads(cfg: ExperimentConfig) -> list:
    base = cfg.resolved()
    sw = cfg.sweep
    mode = sw.get("mode") or base["train"]["mode"]
    payloads = []
    for method, beta, seed in itertools.product(sw["methods"], sw["betas"], sw["seeds"]):
        if method not in METHODS:
            raise ConfigError(f"sweep method {method!r} is not one of {METHODS}")
        d = copy.deepcopy(base)
        d["method"], d["seed"] = method, int(seed)
        d["train"]["mode"] = mode
        d["train"]["beta"] = float(beta)
        d["train"]["attack"]["beta"] = float(beta)
        d["out"] = str(Path(cfg.out) / f"{method}_{mode}_b{beta:g}_s{seed}")
        payloads.append((d, mode))
    return payloads


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    out = _outdir(cfg.out)
    payloads = sweep_payloads(cfg)
    _dump(out / "config.json", cfg.resolved())
    workers = int(cfg.sweep.get("workers") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, payloads))
    else:
        results = [_run_one(p) for p in payloads]
    path = out / "metrics.csv"
    if path.exists():
        path.unlink()
    failed = []
    # rows are gathered in grid order so the file does not depend on scheduling
    for d, mode, res, err in results:
        if err is not None:
            failed.append((d["out"], err))
            continue
        run_csv = Path(d["out"]) / "metrics.csv"
        with run_csv.open() as fh:
            append_metrics_csv(path, list(csv.DictReader(fh))[-len(d["eval"]):])
    if failed:
        for where, err in failed:
            logger.error("run %s diverged: %s", where, err)
        raise DivergenceError(f"{len(failed)} of {len(results)} runs diverged")
    return path


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--mode", choices=("standard", "robust"))
    common.add_argument("--beta", type=float, help="attack radius for robust training and evaluation")
    common.add_argument("--attack-norm", choices=("2", "inf"))
    common.add_argument("--pgd-steps", type=int)
    common.add_argument("--pgd-step-size", type=float)
    common.add_argument("--out", help="output directory")
    common.add_argument("--epochs", type=int)
    common.add_argument("--data", help="dataset CSV (replaces the synthetic source)")
    common.add_argument("--data-kind", choices=DATA_KINDS)
    common.add_argument("--n", type=int, help="synthetic sample count")
    common.add_argument("--data-beta", type=float, help="synthetic noise variance")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cari", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset CSV")
    sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint")
    p = sub.add_parser("scaling-check", parents=[common], help="MI gap versus sample size")
    p.add_argument("--checkpoint")
    sub.add_parser("sweep", parents=[common], help="grid of (method, beta, seed) runs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "scaling-check":
            cmd_scaling_check(cfg, args.checkpoint)
        elif args.command == "sweep":
            cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CariError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
