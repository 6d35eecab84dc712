"""Finite-difference oracles, pseudo-label corruption and uncertainty probes."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import AugmentConfig, TriBatch, UnlabeledPool, augment_views, feature_scale
from .errors import NumericError, ParameterError
from .models import RegressionNet, UncertaintyLearner, forward_uncertainty, predict
from .numerics import SeededRng
from .objectives import grad_inner_theta, inner_state, outer_loss

CORRUPTION_MODES = ("offset", "sign_flip_residual", "uniform_replace")


@dataclass(frozen=True)
class FdConfig:
    step: float = 1e-6
    rel_err_tol: float = 1e-6

    def __post_init__(self):
        if not self.step > 0:
            raise ParameterError("finite-difference step must be > 0")


def rel_err(a, b) -> float:
    """max|a - b| / max(1, max|a|, max|b|)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(a @ b / (na * nb))


def central_difference(loss: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    probe = x.copy()
    for i in range(x.size):
        probe[i] = x[i] + step
        fp = loss(probe)
        probe[i] = x[i] - step
        fm = loss(probe)
        probe[i] = x[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss when probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad


def fd_grad_theta(loss: Callable[[np.ndarray], float], theta, cfg: FdConfig = FdConfig()) -> np.ndarray:
    return central_difference(loss, theta, cfg.step)


def hypergrad_closure(
    net: RegressionNet,
    ul: UncertaintyLearner,
    batch: TriBatch,
    lam: float,
    alpha: float,
    unroll_mode: str = "head_only",
) -> Callable[[np.ndarray], float]:
    """phi (flat) -> outer loss after one inner step taken with that phi.

    ``full`` re-runs the complete inner update. ``head_only`` takes the
    extractor update computed at the base phi and lets only the head update
    depend on the probed phi, which is exactly the dependence the analytic
    hypergradient keeps.
    """
    from .bilevel import inner_step

    if unroll_mode == "full":
        def closure(phi):
            updated, _ = inner_step(net, ul.unflatten(phi), batch, lam, alpha)
            return outer_loss(updated, batch)
        return closure
    if unroll_mode != "head_only":
        raise ParameterError(f"unknown unroll mode {unroll_mode!r}")

    base, _ = inner_step(net, ul, batch, lam, alpha)
    st = inner_state(net, ul, batch)
    g_sup = grad_inner_theta(net, None, batch, 0.0).head_flat()
    feats = np.column_stack([st.cache_u.features, np.ones(batch.m)])
    head = net.head_flat()

    def closure(phi):
        z = forward_uncertainty(ul.unflatten(phi), st.r_u, batch.pseudo_labels)
        coef = lam * 2.0 * np.exp(-z) * (st.r_u - batch.pseudo_labels)
        new_head = head - alpha * (g_sup + feats.T @ coef)
        return outer_loss(base.with_head(new_head), batch)

    return closure


def fd_hypergrad_phi(
    net: RegressionNet,
    ul: UncertaintyLearner,
    batch: TriBatch,
    lam: float,
    alpha: float,
    unroll_mode: str = "head_only",
    cfg: FdConfig = FdConfig(),
) -> np.ndarray:
    closure = hypergrad_closure(net, ul, batch, lam, alpha, unroll_mode)
    return central_difference(closure, ul.flat(), cfg.step)


# -------------------------------------------------------------- corruption


@dataclass(frozen=True)
class CorruptionSpec:
    """Tamper with a random ``fraction`` of pseudo-labels.

    ``offset`` adds ``magnitude * target_std``; ``sign_flip_residual``
    reflects the pseudo-label about the labeled target mean (magnitude
    unused); ``uniform_replace`` draws from ``target_mean +- magnitude * target_std``.
    """

    fraction: float = 0.0
    magnitude: float = 3.0
    mode: str = "offset"

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ParameterError("corruption fraction must be in [0, 1]")
        if self.mode not in CORRUPTION_MODES:
            raise ParameterError(f"unknown corruption mode {self.mode!r}")


def corrupt_values(y_hat: np.ndarray, mask: np.ndarray, spec: CorruptionSpec, rng: SeededRng, mean: float, std: float):
    out = y_hat.copy()
    if spec.mode == "offset":
        out[mask] = y_hat[mask] + spec.magnitude * std
    elif spec.mode == "sign_flip_residual":
        out[mask] = 2.0 * mean - y_hat[mask]
    else:
        u = rng.uniform(y_hat.shape, -1.0, 1.0)
        out[mask] = mean + spec.magnitude * std * u[mask]
    return out


def corrupt_pseudo_labels(batch: TriBatch, spec: CorruptionSpec, rng: SeededRng, fraction: float | None = None) -> TriBatch:
    """Return a copy with a Bernoulli(``fraction``) subset of pseudo-labels
    tampered; the mask is stored on ``corrupted``. Untouched entries are
    bit-identical to the input.
    """
    p = spec.fraction if fraction is None else fraction
    mask = rng.uniform(batch.m) < p
    y = corrupt_values(batch.pseudo_labels, mask, spec, rng, batch.target_mean, batch.target_std)
    return replace(batch, pseudo_labels=y, corrupted=mask)


def uncertainty_separation(z, corrupted_mask):
    """(mean z over corrupted, mean z over clean, difference)."""
    z = np.asarray(z, dtype=np.float64)
    mask = np.asarray(corrupted_mask, dtype=bool)
    if z.shape != mask.shape:
        raise ParameterError("z and mask lengths differ")
    if not mask.any() or mask.all():
        raise ParameterError("both corrupted and clean groups must be nonempty")
    zc, zk = float(np.mean(z[mask])), float(np.mean(z[~mask]))
    return zc, zk, zc - zk


@dataclass
class UncertaintyProbe:
    z: np.ndarray
    pseudo_labels: np.ndarray
    truth: np.ndarray
    corrupted: np.ndarray

    @property
    def sigma_sq(self) -> np.ndarray:
        return np.exp(self.z)

    @property
    def abs_err(self) -> np.ndarray:
        """Absolute error of each pseudo-label against the hidden true target."""
        return np.abs(self.pseudo_labels - self.truth)


def uncertainty_probe(
    net: RegressionNet,
    ul: UncertaintyLearner | None,
    pool: UnlabeledPool,
    aug: AugmentConfig,
    rng: SeededRng,
    corruption: CorruptionSpec | None = None,
    target_mean: float = 0.0,
    target_std: float = 1.0,
    scale: np.ndarray | None = None,
) -> UncertaintyProbe:
    """Pseudo-label every unlabeled row with a known true target and score it
    with the learner, mimicking a training iteration. Diagnostic only.
    """
    truth = pool.shadow_targets()
    keep = ~np.isnan(truth)
    x, truth = pool.x[keep], truth[keep]
    if scale is None:
        scale = feature_scale(pool.x)
    weak, strong = augment_views(rng, x, aug, scale)
    y_hat = predict(net, weak)
    r = predict(net, strong)
    mask = np.zeros(y_hat.shape, dtype=bool)
    if corruption is not None and corruption.fraction > 0:
        mask = rng.uniform(y_hat.size) < corruption.fraction
        y_hat = corrupt_values(y_hat, mask, corruption, rng, target_mean, target_std)
    z = np.zeros_like(r) if ul is None else forward_uncertainty(ul, r, y_hat)
    return UncertaintyProbe(z, y_hat, truth, mask)


# ---------------------------------------------------------- oracle suite


@dataclass(frozen=True)
class InstanceSpec:
    """Family of tiny random problems the oracle checks draw from.

    Inputs are U[-1, 1], targets ``sin(2x)``, the weak and strong views add
    N(0, 0.05^2) and N(0, 0.2^2) noise, pseudo-labels are weak-view
    predictions plus N(0, label_noise^2), and every learner weight is
    N(0, ul_std^2) so z is non-trivial.
    """

    n: int = 4
    m: int = 4
    hidden: int = 8
    feature_dim: int = 8
    ul_hidden: int = 8
    ul_std: float = 0.1
    label_noise: float = 0.5
    bias_std: float = 0.1


def random_instance(seed: int, spec: InstanceSpec = InstanceSpec()):
    """Deterministic ``(net, ul, batch)`` for one seed."""
    from .models import init_regression_net, init_uncertainty_learner

    rng = SeededRng(seed)
    net = init_regression_net(rng, 1, [spec.hidden], spec.feature_dim)
    # nonzero biases keep pre-activations off the ReLU kink at exactly 0,
    # which zero biases hit whenever a sample's previous layer is all dead
    ext = net.extractor
    biases = tuple(rng.normal(b.shape, 0.0, spec.bias_std) for b in ext.biases)
    net = replace(net, extractor=replace(ext, biases=biases))
    ul = init_uncertainty_learner(rng, spec.ul_hidden, 6.0)
    ul = ul.unflatten(rng.normal(ul.size, 0.0, spec.ul_std))

    def target(x):
        return np.sin(2.0 * x[:, 0])

    x_u = rng.uniform((spec.m, 1), -1.0, 1.0)
    weak = x_u + rng.normal((spec.m, 1), 0.0, 0.05)
    strong = x_u + rng.normal((spec.m, 1), 0.0, 0.2)
    x_l = rng.uniform((spec.n, 1), -1.0, 1.0)
    x_o = rng.uniform((spec.n, 1), -1.0, 1.0)
    y_hat = predict(net, weak) + rng.normal(spec.m, 0.0, spec.label_noise)
    batch = TriBatch(
        x_l, target(x_l), weak, strong, x_o, target(x_o), y_hat,
        np.arange(spec.n), np.arange(spec.m), np.arange(spec.n, 2 * spec.n),
    )
    return net, ul, batch


LINEARIZATION_ALPHAS = (1e-3, 5e-4, 2.5e-4)


@dataclass(frozen=True)
class OracleResult:
    seed: int
    inner_theta_err: float
    outer_theta_err: float
    head_only_err: float
    full_cosine: float
    linearization_slope: float
    linearization_errs: tuple[float, ...]


def linearization_slope(net, ul, batch, lam: float, alphas=LINEARIZATION_ALPHAS):
    """Log-log slope of the linearization residual against alpha."""
    from .bilevel import linearization_check

    errs = tuple(linearization_check(net, ul, batch, lam, a)[2] for a in alphas)
    slope = float(np.polyfit(np.log(alphas), np.log(errs), 1)[0])
    return slope, errs


def oracle_checks(seed: int, spec: InstanceSpec = InstanceSpec(), lam: float = 1.0, alpha: float = 1e-3,
                  cfg: FdConfig = FdConfig()) -> OracleResult:
    """Every finite-difference comparison on one random instance."""
    from .bilevel import hypergradient_phi, inner_step
    from .objectives import grad_outer_theta, inner_loss

    net, ul, batch = random_instance(seed, spec)
    theta = net.flat()
    # z is a constant w.r.t. theta, so the oracle freezes it at the base point
    z = inner_state(net, ul, batch).z
    g_in = grad_inner_theta(net, ul, batch, lam).flat()
    fd_in = fd_grad_theta(lambda t: inner_loss(net.unflatten(t), None, batch, lam, z=z).total, theta, cfg)
    g_out = grad_outer_theta(net, batch).flat()
    fd_out = fd_grad_theta(lambda t: outer_loss(net.unflatten(t), batch), theta, cfg)

    updated, record = inner_step(net, ul, batch, lam, alpha)
    hg = hypergradient_phi(record, updated, ul, batch, lam).phi_grad.flat()
    fd_head = fd_hypergrad_phi(net, ul, batch, lam, alpha, "head_only", cfg)
    fd_full = fd_hypergrad_phi(net, ul, batch, lam, alpha, "full", cfg)
    slope, errs = linearization_slope(net, ul, batch, lam)
    return OracleResult(
        seed, rel_err(g_in, fd_in), rel_err(g_out, fd_out), rel_err(hg, fd_head),
        cosine(hg, fd_full), slope, errs,
    )
