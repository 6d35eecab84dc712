"""Regression metrics and uncertainty diagnostics.

Metrics are per-sample means, unlike the training losses, which are sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ParameterError, ShapeError, UndefinedMetricError

log = logging.getLogger(__name__)


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"prediction length {p.size} != truth length {t.size}")
    if p.size == 0:
        raise ParameterError("metric of an empty array")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    d = p - t
    return float(np.mean(d * d))


def r2(pred, truth) -> float:
    p, t = _pair(pred, truth)
    dev = t - t.mean()
    ss_tot = float(np.sum(dev * dev))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    d = p - t
    return 1.0 - float(np.sum(d * d)) / ss_tot


@dataclass(frozen=True)
class MetricsRecord:
    mae: float
    mse: float
    r2: float
    n: int


def metrics_record(pred, truth) -> MetricsRecord:
    p, t = _pair(pred, truth)
    return MetricsRecord(mae(p, t), mse(p, t), r2(p, t), p.size)


def subgroup_std(pseudo_labels, group_keys) -> dict:
    """Population std (divide by count) of pseudo-labels per group.

    Groups with fewer than two members are left out.
    """
    y = np.asarray(pseudo_labels, dtype=np.float64).ravel()
    keys = np.asarray(group_keys).ravel()
    if y.shape != keys.shape:
        raise ShapeError("pseudo_labels and group_keys lengths differ")
    out = {}
    for k in np.unique(keys):
        members = y[keys == k]
        if members.size < 2:
            log.info("group %r has %d sample(s); omitted", k, members.size)
            continue
        out[k.item() if hasattr(k, "item") else k] = float(np.std(members))
    return out


def target_bins(y, width: float = 0.25) -> np.ndarray:
    """Integer bin index of each target, for grouping continuous targets."""
    return np.floor(np.asarray(y, dtype=np.float64) / width).astype(np.int64)


def sigma_error_spearman(sigma_sq, abs_err) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(sigma_sq, dtype=np.float64).ravel()
    b = np.asarray(abs_err, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("sigma_sq and abs_err lengths differ")
    if a.size < 3:
        raise ParameterError("need at least 3 samples")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if den == 0.0:
        raise UndefinedMetricError("rank correlation is undefined for a constant input")
    return float(np.clip(np.sum(ra * rb) / den, -1.0, 1.0))
