"""Dataset container and CSV readers/writers."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    pa: Optional[np.ndarray] = None
    nd: Optional[np.ndarray] = None
    dc: Optional[np.ndarray] = None


@dataclass
class Dataset:
    """Column-oriented collection of samples.

    ``x`` is float features for the MLP encoder path, or an ``(n, 2)`` integer
    array of (user_id, item_id) when ``encoder_path == "embedding"``.
    Factor blocks ``pa``/``nd``/``dc`` are present only for synthetic data.
    """

    x: np.ndarray
    y: np.ndarray
    pa: Optional[np.ndarray] = None
    nd: Optional[np.ndarray] = None
    dc: Optional[np.ndarray] = None
    split: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"x has {len(self.x)} rows but y has {len(self.y)}")

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Sample:
        return Sample(
            x=self.x[i],
            y=int(self.y[i]),
            pa=None if self.pa is None else self.pa[i],
            nd=None if self.nd is None else self.nd[i],
            dc=None if self.dc is None else self.dc[i],
        )

    @property
    def encoder_path(self) -> str:
        return self.meta.get("encoder_path", "mlp")

    @property
    def d_in(self) -> int:
        return int(self.x.shape[1])

    @property
    def has_factors(self) -> bool:
        return self.pa is not None

    def subset(self, idx, tag: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        split = None if tag is None else np.full(len(idx), tag)
        return Dataset(
            x=self.x[idx], y=self.y[idx], pa=pick(self.pa), nd=pick(self.nd), dc=pick(self.dc),
            split=split if split is not None else pick(self.split), meta=dict(self.meta),
        )


def split(ds: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffle deterministically and cut into (train, val, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    cuts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(ds.subset(c, tag) for c, tag in zip(cuts, ("train", "val", "test")))


# ---------------------------------------------------------------- factor CSV


def factor_header(d1: int, d2: int, d3: int) -> list[str]:
    return ([f"pa_{i}" for i in range(d1)] + [f"nd_{i}" for i in range(d2)]
            + [f"dc_{i}" for i in range(d3)] + ["y"])


def write_factor_csv(ds: Dataset, path) -> None:
    d1, d2, d3 = ds.pa.shape[1], ds.nd.shape[1], ds.dc.shape[1]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(factor_header(d1, d2, d3))
        for i in range(len(ds)):
            row = [format(float(v), ".17g") for v in np.concatenate([ds.pa[i], ds.nd[i], ds.dc[i]])]
            w.writerow(row + [str(int(ds.y[i]))])


def read_factor_csv(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        blocks = {k: [i for i, h in enumerate(header) if h.startswith(k + "_")] for k in ("pa", "nd", "dc")}
        known = set(sum(blocks.values(), [])) | {header.index("y")} if "y" in header else None
        if known is None or len(known) != len(header):
            raise DataError(f"{path}: header does not match the factor schema")
        yi = header.index("y")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    pa, nd, dc = (arr[:, blocks[k]] for k in ("pa", "nd", "dc"))
    y = arr[:, yi].astype(np.int64)
    return Dataset(x=np.concatenate([pa, nd, dc], axis=1), y=y, pa=pa, nd=nd, dc=dc,
                   meta={"encoder_path": "mlp", "schema": "factor"})


# ---------------------------------------------------------------- rating CSVs


def load_rating_csv(path, kind: str, label_threshold: Optional[float] = None) -> Dataset:
    """Read an ``id-rating`` or ``feature-rating`` file.

    id-rating columns are exactly ``user_id,item_id,label``; feature-rating has a
    ``label`` column plus numeric feature columns. With ``label_threshold`` set,
    labels become ``label >= threshold``.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    if kind not in ("id-rating", "feature-rating"):
        raise ConfigError(f"unknown rating schema kind {kind!r}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if kind == "id-rating":
            if sorted(header) != ["item_id", "label", "user_id"]:
                raise DataError(f"{path}: id-rating schema needs user_id,item_id,label; got {header}")
        elif "label" not in header:
            raise DataError(f"{path}: feature-rating schema needs a label column")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: header only, no samples")
    arr = np.array(rows, dtype=np.float64)
    label = arr[:, header.index("label")]
    if label_threshold is not None:
        y = (label >= label_threshold).astype(np.int64)
    else:
        if not np.all(np.isin(label, (0.0, 1.0))):
            raise DataError(f"{path}: labels must be 0/1 unless a label threshold is configured")
        y = label.astype(np.int64)

    if kind == "id-rating":
        ids = arr[:, [header.index("user_id"), header.index("item_id")]]
        if np.any(ids < 0) or np.any(ids != np.round(ids)):
            raise DataError(f"{path}: ids must be non-negative integers")
        ids = ids.astype(np.int64)
        meta = {"encoder_path": "embedding", "schema": kind,
                "n_users": int(ids[:, 0].max()) + 1, "n_items": int(ids[:, 1].max()) + 1}
        return Dataset(x=ids, y=y, meta=meta)
    feat_cols = [i for i, h in enumerate(header) if h != "label"]
    return Dataset(x=arr[:, feat_cols], y=y,
                   meta={"encoder_path": "mlp", "schema": kind,
                         "feature_names": [header[i] for i in feat_cols]})
