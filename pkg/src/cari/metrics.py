"""Evaluation: clean and adversarial AUC/ACC, distance correlation, CMI probe,
and the finite-sample MI scaling check.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .attack import AttackConfig, cross_entropy_loss, pgd
from .data import Dataset
from .errors import BatchSizeError, UndefinedMetricError
from .model import ModelState, encode, predict_proba

# ---------------------------------------------------------------- AUC / ACC


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied pairs get half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def acc(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    return float(np.mean((scores > threshold).astype(np.int64) == labels))


# ---------------------------------------------------------------- clean / adversarial evaluation


def representations(model: ModelState, ds: Dataset) -> np.ndarray:
    """Posterior means; evaluation never samples."""
    mu, _ = encode(model, ds.x)
    return mu


def clean_metrics(model: ModelState, ds: Dataset, z: Optional[np.ndarray] = None):
    z = representations(model, ds) if z is None else z
    p1 = predict_proba(model, z)[:, 1]
    return auc(p1, ds.y), acc(p1, ds.y)


def attacked_representations(model: ModelState, ds: Dataset, cfg: AttackConfig,
                             z: Optional[np.ndarray] = None, batch_size: int = 256, rng=None) -> np.ndarray:
    z = representations(model, ds) if z is None else z
    cfg = cfg.with_(direction="minimize-MI")
    out = np.empty_like(z)
    for s in range(0, len(z), batch_size):
        sl = slice(s, s + batch_size)
        out[sl] = pgd(z[sl], cross_entropy_loss(model, ds.y[sl]), cfg, rng)
    return out


def adv_metrics(model: ModelState, ds: Dataset, cfg: AttackConfig, z: Optional[np.ndarray] = None):
    """(adv_auc, adv_acc) after perturbing each test representation at the configured ball."""
    z_adv = attacked_representations(model, ds, cfg, z)
    p1 = predict_proba(model, z_adv)[:, 1]
    return auc(p1, ds.y), acc(p1, ds.y)


# ---------------------------------------------------------------- distance correlation


def _double_centered(a: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.maximum(((a[:, None, :] - a[None, :, :]) ** 2).sum(-1), 0.0))
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def distance_correlation(a, b) -> float:
    """Sample distance correlation of two paired samples (rows are observations)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise BatchSizeError("distance correlation needs at least 2 samples")
    A, B = _double_centered(a), _double_centered(b)
    dcov2 = (A * B).mean()
    dvar_a, dvar_b = (A * A).mean(), (B * B).mean()
    if dvar_a <= 0 or dvar_b <= 0:
        return 0.0
    r2 = dcov2 / math.sqrt(dvar_a * dvar_b)
    return float(math.sqrt(min(max(r2, 0.0), 1.0)))


# ---------------------------------------------------------------- discrete MI helpers


def _top_components(a: np.ndarray, k: int = 2) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    centered = a - a.mean(axis=0)
    if a.shape[1] <= k:
        return centered
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:k].T


def _quantile_codes(col: np.ndarray, bins: int) -> np.ndarray:
    edges = np.unique(np.quantile(col, np.linspace(0, 1, bins + 1)[1:-1]))
    return np.searchsorted(edges, col, side="right")


def _cell_codes(block: np.ndarray, bins: int) -> np.ndarray:
    """Joint cell index of the top-2 principal components, each cut into ``bins`` quantile bins."""
    proj = _top_components(block)
    codes = np.zeros(len(proj), dtype=np.int64)
    for j in range(proj.shape[1]):
        codes = codes * (bins + 1) + _quantile_codes(proj[:, j], bins)
    return np.unique(codes, return_inverse=True)[1]


def _conditional_entropy(y_codes, cond_codes, alpha: float, n_y: int) -> float:
    """H(Y | C) from smoothed counts; cells with no data carry no weight."""
    cond = np.unique(cond_codes, return_inverse=True)[1]
    counts = np.zeros((cond.max() + 1, n_y))
    np.add.at(counts, (cond, y_codes), 1.0)
    smoothed = counts + alpha
    p_y_given_c = smoothed / smoothed.sum(axis=1, keepdims=True)
    p_c = counts.sum(axis=1) / counts.sum()
    return float(-(p_c[:, None] * p_y_given_c * np.log(p_y_given_c)).sum())


def cmi_probe(z, pa, nd, y, bins: int = 4, alpha: float = 1e-3) -> float:
    """Plug-in I(Y; pa, nd | Z) in nats on discretised projections.

    Z and the block [pa, nd] are each reduced to their top-2 principal
    components and cut into quantile bins; empty cells get Laplace mass alpha.
    """
    y = np.asarray(y, dtype=np.int64)
    zc = _cell_codes(z, bins)
    wc = _cell_codes(np.concatenate([np.asarray(pa).reshape(len(y), -1),
                                     np.asarray(nd).reshape(len(y), -1)], axis=1), bins)
    joint = zc * (wc.max() + 1) + wc
    n_y = int(y.max()) + 1 if len(y) else 1
    val = _conditional_entropy(y, zc, alpha, n_y) - _conditional_entropy(y, joint, alpha, n_y)
    return max(val, 0.0)


def plugin_mi(x_codes, y) -> float:
    """Unsmoothed plug-in I(X; Y) for integer codes."""
    x_codes = np.unique(np.asarray(x_codes), return_inverse=True)[1]
    y = np.unique(np.asarray(y), return_inverse=True)[1]
    joint = np.zeros((x_codes.max() + 1, y.max() + 1))
    np.add.at(joint, (x_codes, y), 1.0)
    joint /= joint.sum()
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


# ---------------------------------------------------------------- scaling check


class Quantizer:
    """Fixed discretisation of z: top-2 PCA projection, 1-D k-means per component.

    Fit once on a reference sample so every sample size estimates the same
    discrete MI. ``cells`` is the total cell count (cells_per_dim squared).
    """

    def __init__(self, cells: int = 16, seed: int = 0):
        self.per_dim = int(round(math.sqrt(cells)))
        if self.per_dim ** 2 != cells:
            raise ValueError("cells must be a perfect square")
        self.seed = seed

    def fit(self, z: np.ndarray) -> "Quantizer":
        from scipy.cluster.vq import kmeans2

        z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
        self.mean_ = z.mean(axis=0)
        centered = z - self.mean_
        k = min(2, z.shape[1])
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        self.components_ = vt[:k]
        proj = centered @ self.components_.T
        self.boundaries_ = []
        for j in range(k):
            cents, _ = kmeans2(proj[:, j][:, None], self.per_dim, minit="++", seed=self.seed + j)
            c = np.sort(np.unique(cents.ravel()))
            self.boundaries_.append((c[1:] + c[:-1]) / 2)
        return self

    def transform(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64).reshape(len(z), -1)
        proj = (z - self.mean_) @ self.components_.T
        codes = np.zeros(len(z), dtype=np.int64)
        for j, bnd in enumerate(self.boundaries_):
            codes = codes * self.per_dim + np.searchsorted(bnd, proj[:, j])
        return codes


@dataclass
class ScalingCheck:
    m: list
    median_gap: list
    q25: list
    q75: list
    gaps: list = field(default_factory=list)  # [len(m)][n_seeds]
    gamma: float = math.nan
    reference_mi: float = math.nan
    reference_m: int = 0
    cells: int = 16

    def shrink_factors(self) -> list:
        return [a / b if b > 0 else math.inf for a, b in zip(self.median_gap[:-1], self.median_gap[1:])]

    def seeds_improved(self) -> int:
        """Seeds whose gap at the largest m is below their gap at the smallest m."""
        g = np.asarray(self.gaps)
        return int((g[-1] < g[0]).sum())

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "median_gap", "q25", "q75"])
            for row in zip(self.m, self.median_gap, self.q25, self.q75):
                w.writerow([row[0]] + [format(v, ".17g") for v in row[1:]])

    def summary(self) -> dict:
        return {"gamma": self.gamma, "reference_mi": self.reference_mi, "reference_m": self.reference_m,
                "cells": self.cells, "m": self.m, "median_gap": self.median_gap,
                "shrink_factors": self.shrink_factors(), "seeds_improved": self.seeds_improved(),
                "n_seeds": len(self.gaps[0]) if self.gaps else 0}


def fit_decay_exponent(m: Sequence[float], gap: Sequence[float]) -> float:
    """gamma in gap ~ m^-gamma by least squares on log-log."""
    slope, _ = np.polyfit(np.log(np.asarray(m, dtype=np.float64)), np.log(np.asarray(gap, dtype=np.float64)), 1)
    return float(-slope)


def scaling_check(sampler: Callable[[int, int], Dataset], representation: Callable[[Dataset], np.ndarray],
                  m_list=(100, 400, 1600, 6400), seeds=range(10), reference_m: int = 100_000,
                  cells: int = 16, reference_seed: int = 10**6) -> ScalingCheck:
    """Finite-sample gap |I_m(Y;Z) - I_ref(Y;Z)| of the plug-in MI over quantised z.

    ``sampler(n, seed)`` draws a dataset and ``representation(ds)`` maps it to z.
    """
    m_list = [int(m) for m in m_list]
    if any(b <= a for a, b in zip(m_list, m_list[1:])):
        raise ValueError("m_list must be strictly increasing")
    ref = sampler(reference_m, reference_seed)
    z_ref = representation(ref)
    quant = Quantizer(cells).fit(z_ref)
    i_ref = plugin_mi(quant.transform(z_ref), ref.y)

    seeds = list(seeds)
    gaps = np.zeros((len(m_list), len(seeds)))
    for j, s in enumerate(seeds):
        big = sampler(m_list[-1], s)
        codes = quant.transform(representation(big))
        # nested prefixes of one draw per seed
        for i, m in enumerate(m_list):
            gaps[i, j] = abs(plugin_mi(codes[:m], big.y[:m]) - i_ref)
    med = np.median(gaps, axis=1)
    return ScalingCheck(
        m=m_list, median_gap=med.tolist(),
        q25=np.quantile(gaps, 0.25, axis=1).tolist(), q75=np.quantile(gaps, 0.75, axis=1).tolist(),
        gaps=gaps.tolist(), gamma=fit_decay_exponent(m_list, med), reference_mi=i_ref,
        reference_m=reference_m, cells=cells,
    )


# ---------------------------------------------------------------- reports


@dataclass
class AdvReport:
    norm: str
    beta: float
    adv_auc: float
    adv_acc: float


@dataclass
class MetricsReport:
    auc: float
    acc: float
    adv_auc: float
    adv_acc: float
    adv_norm: str
    adv_beta: float
    dcor_pa: Optional[float] = None
    dcor_nd: Optional[float] = None
    dcor_dc: Optional[float] = None
    cmi_probe: Optional[float] = None
    cmi_bins: Optional[int] = None
    sub_reports: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def csv_rows(self, key: dict) -> list:
        """One flat row per sub-report, prefixed with identifying ``key`` columns."""
        rows = []
        for sub in self.sub_reports or [AdvReport(self.adv_norm, self.adv_beta, self.adv_auc, self.adv_acc)]:
            rows.append({**key, "norm": sub.norm, "beta": sub.beta, "auc": self.auc, "acc": self.acc,
                         "adv_auc": sub.adv_auc, "adv_acc": sub.adv_acc, "dcor_pa": self.dcor_pa,
                         "dcor_nd": self.dcor_nd, "dcor_dc": self.dcor_dc, "cmi_probe": self.cmi_probe})
        return rows


def evaluate(model: ModelState, ds: Dataset, attacks: Sequence[AttackConfig], cmi_bins: int = 4) -> MetricsReport:
    z = representations(model, ds)
    a, c = clean_metrics(model, ds, z)
    subs = []
    for cfg in attacks:
        aa, ac = adv_metrics(model, ds, cfg, z)
        subs.append(AdvReport(cfg.norm, cfg.beta, aa, ac))
    first = subs[0] if subs else AdvReport("inf", 0.0, a, c)
    report = MetricsReport(auc=a, acc=c, adv_auc=first.adv_auc, adv_acc=first.adv_acc,
                           adv_norm=first.norm, adv_beta=first.beta, sub_reports=subs)
    if ds.has_factors:
        report.dcor_pa = distance_correlation(z, ds.pa)
        report.dcor_nd = distance_correlation(z, ds.nd)
        report.dcor_dc = distance_correlation(z, ds.dc)
        report.cmi_probe = cmi_probe(z, ds.pa, ds.nd, ds.y, bins=cmi_bins)
        report.cmi_bins = cmi_bins
    return report


METRIC_FIELDS = ("method", "mode", "norm", "beta", "seed", "auc", "acc", "adv_auc", "adv_acc",
                 "dcor_pa", "dcor_nd", "dcor_dc", "cmi_probe")


def append_metrics_csv(path, rows: list) -> None:
    """Append rows, writing the header only when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore", lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in METRIC_FIELDS})
