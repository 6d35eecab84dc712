"""One-step bi-level update of the regression net and the uncertainty-learner.

The inner step is plain gradient descent on the inner loss. The
hypergradient unrolls that step through the linear head only: with the
head block ``[w; b]`` updated as

    head' = head - alpha * (g_labeled + lam * sum_j 2 exp(-z_j) (r_j - y_hat_j) [h_j; 1])

we get ``d head' / d z_j = alpha * lam * 2 exp(-z_j) (r_j - y_hat_j) [h_j; 1]``.
Chaining with ``v``, the head gradient of the outer loss at the updated
net, gives a scalar ``s_j`` per unlabeled sample, and the phi-gradient is
``sum_j s_j * dz_j/dphi``, which is a single backward pass through the learner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TriBatch
from .errors import ContractError, NumericError, ParameterError
from .models import (
    RegressionNet,
    UncertaintyCache,
    UncertaintyLearner,
    backward_uncertainty,
    forward_regression,
    jvp_regression,
)
from .numerics import dot
from .objectives import grad_inner_theta, grad_outer_theta, inner_output_grads, inner_state


@dataclass
class InnerStepRecord:
    theta_before: np.ndarray
    theta_after: np.ndarray
    head_grad_per_unlabeled: np.ndarray  # (m, feature_dim + 1), rows c_j
    alpha: float
    alpha_extractor: float
    lam: float
    z: np.ndarray
    residual: np.ndarray  # r_j - y_hat_j, pre-update strong view
    ul_cache: UncertaintyCache | None
    idx_u: np.ndarray
    idx_o: np.ndarray


@dataclass
class Hypergradient:
    phi_grad: UncertaintyLearner
    per_sample_scalar: np.ndarray


def _gd(theta: np.ndarray, grad: np.ndarray, alpha: float, alpha_ext: float, n_head: int) -> np.ndarray:
    if alpha == alpha_ext:
        return theta - alpha * grad
    out = theta - alpha_ext * grad
    out[-n_head:] = theta[-n_head:] - alpha * grad[-n_head:]
    return out


def inner_step(
    net: RegressionNet,
    ul: UncertaintyLearner | None,
    batch: TriBatch,
    lam: float,
    alpha: float,
    alpha_extractor: float | None = None,
    z=None,
):
    """theta <- theta - alpha * grad L_inner. ``alpha`` drives the head,
    ``alpha_extractor`` (default ``alpha``) the feature extractor.

    Returns ``(updated net, InnerStepRecord)``.
    """
    alpha_ext = alpha if alpha_extractor is None else alpha_extractor
    if alpha < 0 or alpha_ext < 0:
        raise ParameterError("learning rates must be >= 0")
    st = inner_state(net, ul, batch, z)
    grad = grad_inner_theta(net, ul, batch, lam, state=st).flat()
    theta = net.flat()
    after = _gd(theta, grad, alpha, alpha_ext, net.feature_dim + 1)
    if not np.all(np.isfinite(after)):
        raise NumericError("inner step produced non-finite parameters")
    if batch.m:
        coef = 2.0 * np.exp(-st.z) * (st.r_u - batch.pseudo_labels)
        feats = np.column_stack([st.cache_u.features, np.ones(batch.m)])
        c = coef[:, None] * feats
    else:
        c = np.zeros((0, net.feature_dim + 1))
    resid = st.r_u - batch.pseudo_labels
    record = InnerStepRecord(
        theta, after, c, alpha, alpha_ext, lam, st.z, resid, st.ul_cache,
        batch.idx_u.copy(), batch.idx_o.copy(),
    )
    return net.unflatten(after), record


def hypergradient_phi(
    record: InnerStepRecord,
    updated: RegressionNet,
    ul: UncertaintyLearner,
    batch: TriBatch,
    lam: float,
) -> Hypergradient:
    if record.ul_cache is None:
        raise ContractError("inner step was not taken with an uncertainty-learner")
    if not (np.array_equal(record.idx_u, batch.idx_u) and np.array_equal(record.idx_o, batch.idx_o)):
        raise ContractError("record was produced from a different batch")
    if record.head_grad_per_unlabeled.shape != (batch.m, updated.feature_dim + 1):
        raise ContractError("record does not match the batch or network shape")
    v = grad_outer_theta(updated, batch).head_flat()
    s = record.alpha * lam * (record.head_grad_per_unlabeled @ v)
    return Hypergradient(backward_uncertainty(ul, record.ul_cache, s), s)


def outer_step(ul: UncertaintyLearner, hypergrad: Hypergradient | UncertaintyLearner, beta: float) -> UncertaintyLearner:
    if beta < 0:
        raise ParameterError("beta must be >= 0")
    g = hypergrad.phi_grad if isinstance(hypergrad, Hypergradient) else hypergrad
    phi = ul.flat() - beta * g.flat()
    if not np.all(np.isfinite(phi)):
        raise NumericError("outer step produced non-finite parameters")
    return ul.unflatten(phi)


def bilevel_step(net, ul, batch: TriBatch, lam: float, alpha: float, beta: float, alpha_extractor=None):
    """One full iteration: inner update, then outer update of the learner."""
    new_net, record = inner_step(net, ul, batch, lam, alpha, alpha_extractor)
    hg = hypergradient_phi(record, new_net, ul, batch, lam)
    return new_net, outer_step(ul, hg, beta), record, hg


def alignment_score(net: RegressionNet, ul, batch: TriBatch, lam: float) -> float:
    """Negative inner product of the inner and outer theta-gradients."""
    g_in = grad_inner_theta(net, ul, batch, lam).flat()
    g_out = grad_outer_theta(net, batch).flat()
    return -dot(g_in, g_out)


def alignment_phi_grad(net: RegressionNet, ul: UncertaintyLearner, batch: TriBatch, lam: float) -> UncertaintyLearner:
    """Analytic phi-gradient of :func:`alignment_score`.

    Only the unlabeled term of the inner gradient depends on phi, through
    ``z_j``: ``d align / d z_j = 2 lam exp(-z_j) (r_j - y_hat_j) <df(x_j)/dtheta, g_out>``.
    """
    st = inner_state(net, ul, batch)
    g_out = grad_outer_theta(net, batch)
    proj = jvp_regression(net, st.cache_u, g_out)
    dz = 2.0 * lam * np.exp(-st.z) * (st.r_u - batch.pseudo_labels) * proj
    return backward_uncertainty(ul, st.ul_cache, dz)


def linearization_check(
    net: RegressionNet,
    ul: UncertaintyLearner,
    batch: TriBatch,
    lam: float,
    alpha: float,
    step: float = 1e-5,
):
    """Compare the exact one-step outer gradient with its linearization.

    ``lhs`` is the central-difference phi-gradient of
    ``outer_loss(theta_{t+1}(phi))`` with the full inner update; ``rhs`` is
    ``alpha * grad_phi alignment_score`` at ``theta_t``. Their difference is a
    Taylor remainder, so ``rel_err = |lhs - rhs| / |lhs|`` (2-norms) is O(alpha).
    """
    from .diagnostics import FdConfig, fd_hypergrad_phi

    lhs = fd_hypergrad_phi(net, ul, batch, lam, alpha, "full", FdConfig(step=step))
    rhs = alpha * alignment_phi_grad(net, ul, batch, lam).flat()
    denom = np.linalg.norm(lhs)
    rel = float(np.linalg.norm(lhs - rhs) / denom) if denom > 0 else float(np.linalg.norm(rhs))
    return lhs, rhs, rel
