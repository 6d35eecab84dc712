"""Training losses and their theta-gradients.

All losses are batch sums. The log-variance ``z`` produced by the
uncertainty-learner is treated as a constant with respect to theta: it is
evaluated once from the current strong-view predictions and then held fixed,
so no gradient flows back through the learner's inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import TriBatch
from .errors import NumericError, ParameterError, ShapeError
from .models import (
    RegressionCache,
    RegressionNet,
    UncertaintyCache,
    UncertaintyLearner,
    backward_regression,
    forward_regression,
    forward_uncertainty,
)


def _sum(a) -> float:
    return math.fsum(np.asarray(a, dtype=np.float64).ravel())


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def supervised_loss(predictions, targets) -> float:
    """Sum of squared errors."""
    p, t = _pair(predictions, targets, "supervised_loss")
    if p.size == 0:
        raise ParameterError("supervised_loss of an empty batch")
    d = t - p
    return _sum(d * d)


def unsup_nll(predictions, pseudo_labels, z) -> float:
    """Heteroscedastic NLL: sum exp(-z) (y_hat - r)^2 + sum z."""
    fit, reg = _unsup_terms(predictions, pseudo_labels, z)
    return fit + reg


def _unsup_terms(r, y_hat, z):
    r, y_hat = _pair(r, y_hat, "unsup_nll")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != r.shape:
        raise ShapeError(f"unsup_nll: z shape {z.shape} does not match {r.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite log-variance")
    d = y_hat - r
    return _sum(np.exp(-z) * (d * d)), _sum(z)


@dataclass(frozen=True)
class InnerLossBreakdown:
    l_sup: float
    l_unsup_fit: float
    l_unsup_reg: float
    lam: float
    total: float


@dataclass
class InnerState:
    """Forward quantities of one inner-loss evaluation at fixed theta."""

    cache_l: RegressionCache
    pred_l: np.ndarray
    cache_u: RegressionCache
    r_u: np.ndarray
    z: np.ndarray
    ul_cache: UncertaintyCache | None


def inner_state(net: RegressionNet, ul: UncertaintyLearner | None, batch: TriBatch, z=None) -> InnerState:
    """Run the forward passes the inner loss needs.

    ``ul=None`` means a fixed unit variance (z == 0). An explicit ``z``
    overrides the learner entirely.
    """
    _, pred_l, cache_l = forward_regression(net, batch.x_l)
    _, r_u, cache_u = forward_regression(net, batch.x_strong)
    ul_cache = None
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != r_u.shape:
            raise ShapeError(f"z has shape {z.shape}, batch has {r_u.shape[0]} unlabeled rows")
    elif ul is None:
        z = np.zeros_like(r_u)
    else:
        z, ul_cache = forward_uncertainty(ul, r_u, batch.pseudo_labels, with_cache=True)
    return InnerState(cache_l, pred_l, cache_u, r_u, z, ul_cache)


def inner_loss(net, ul, batch: TriBatch, lam: float, z=None) -> InnerLossBreakdown:
    st = inner_state(net, ul, batch, z)
    l_sup = supervised_loss(st.pred_l, batch.y_l)
    if batch.m:
        fit, reg = _unsup_terms(st.r_u, batch.pseudo_labels, st.z)
    else:
        fit = reg = 0.0
    return InnerLossBreakdown(l_sup, fit, reg, lam, l_sup + lam * (fit + reg))


def add_grads(a: RegressionNet, b: RegressionNet) -> RegressionNet:
    return a.unflatten(a.flat() + b.flat())


def inner_output_grads(st: InnerState, batch: TriBatch, lam: float):
    """dL_inner/dprediction for the labeled and the strong-view rows."""
    g_l = 2.0 * (st.pred_l - batch.y_l)
    g_u = lam * 2.0 * np.exp(-st.z) * (st.r_u - batch.pseudo_labels)
    return g_l, g_u


def grad_inner_theta(net, ul, batch: TriBatch, lam: float, z=None, state: InnerState | None = None) -> RegressionNet:
    st = state or inner_state(net, ul, batch, z)
    g_l, g_u = inner_output_grads(st, batch, lam)
    grad = backward_regression(net, st.cache_l, g_l)
    if batch.m:
        grad = add_grads(grad, backward_regression(net, st.cache_u, g_u))
    if not np.all(np.isfinite(grad.flat())):
        raise NumericError("non-finite inner gradient")
    return grad


def outer_loss(net: RegressionNet, batch: TriBatch) -> float:
    if batch.x_o.shape[0] == 0:
        raise ParameterError("outer batch is empty")
    _, pred, _ = forward_regression(net, batch.x_o)
    return supervised_loss(pred, batch.y_o)


def grad_outer_theta(net: RegressionNet, batch: TriBatch) -> RegressionNet:
    if batch.x_o.shape[0] == 0:
        raise ParameterError("outer batch is empty")
    _, pred, cache = forward_regression(net, batch.x_o)
    return backward_regression(net, cache, 2.0 * (pred - batch.y_o))
