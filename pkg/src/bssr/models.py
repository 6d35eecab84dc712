"""Regression network and uncertainty-learner with explicit backprop.

Activations are row-per-sample: a layer computes ``x @ W + b`` with ``W`` of
shape ``(fan_in, fan_out)``. Gradients are returned in the same container
type as the parameters so they can be flattened the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import SeededRng, check_finite, elem_map, gauss_sample, matmul

RELU = "relu"
IDENTITY = "identity"


@dataclass(frozen=True)
class MlpParams:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {k} expects input dim {w.shape[0]}, "
                    f"previous layer outputs {self.weights[k - 1].shape[1]}"
                )

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got {vec.shape}")
        ws, bs, i = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[i : i + w.size].reshape(w.shape).copy())
            i += w.size
            bs.append(vec[i : i + b.size].copy())
            i += b.size
        return MlpParams(tuple(ws), tuple(bs), self.activations)

    def zeros_like(self) -> "MlpParams":
        return self.unflatten(np.zeros(self.size))


def _mlp_forward(p: MlpParams, x: np.ndarray):
    """Returns output and the per-layer (input, pre-activation) cache."""
    cache = []
    a = x
    for w, b, act in zip(p.weights, p.biases, p.activations):
        pre = matmul(a, w) + b
        cache.append((a, pre))
        a = elem_map(pre, RELU) if act == RELU else pre
    return a, cache


def _mlp_backward(p: MlpParams, cache, grad_out: np.ndarray):
    """Backprop ``grad_out`` (dL/d output) through the MLP.

    Returns (parameter gradient, dL/d input).
    """
    gws, gbs = [None] * len(p.weights), [None] * len(p.weights)
    g = grad_out
    for k in reversed(range(len(p.weights))):
        a_in, pre = cache[k]
        if pre.shape[1] != g.shape[1] or pre.shape[0] != g.shape[0]:
            raise ShapeError(f"cache of shape {pre.shape} does not match gradient {g.shape}")
        if p.activations[k] == RELU:
            g = g * elem_map(pre, "relu_derivative")
        gws[k] = a_in.T @ g
        gbs[k] = g.sum(axis=0)
        g = g @ p.weights[k].T
    return MlpParams(tuple(gws), tuple(gbs), p.activations), g


def _mlp_jvp(p: MlpParams, cache, d: MlpParams) -> np.ndarray:
    """Directional derivative of the MLP output along parameter direction ``d``."""
    t = np.zeros_like(cache[0][0])
    for k, (w, act) in enumerate(zip(p.weights, p.activations)):
        a_in, pre = cache[k]
        t = t @ w + a_in @ d.weights[k] + d.biases[k]
        if act == RELU:
            t = t * (pre > 0.0)
    return t


def _he_layer(rng: SeededRng, fan_in: int, fan_out: int):
    return gauss_sample(rng, fan_in, fan_out, 0.0, np.sqrt(2.0 / fan_in)), np.zeros(fan_out)


# ---------------------------------------------------------------- regression


@dataclass(frozen=True)
class RegressionNet:
    """ReLU feature extractor followed by a scalar linear head.

    ``flat()`` lays out the extractor first and the head block
    ``[head_w; head_b]`` last, so the head occupies the final
    ``feature_dim + 1`` entries.
    """

    extractor: MlpParams
    head_w: np.ndarray
    head_b: float

    @property
    def input_dim(self) -> int:
        return self.extractor.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.head_w.shape[0]

    @property
    def size(self) -> int:
        return self.extractor.size + self.feature_dim + 1

    def head_flat(self) -> np.ndarray:
        return np.append(self.head_w, self.head_b)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.extractor.flat(), self.head_flat()])

    def unflatten(self, vec: np.ndarray) -> "RegressionNet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"expected flat vector of length {self.size}, got {vec.shape}")
        ne = self.extractor.size
        return RegressionNet(
            self.extractor.unflatten(vec[:ne]), vec[ne:-1].copy(), float(vec[-1])
        )

    def with_head(self, head: np.ndarray) -> "RegressionNet":
        head = np.asarray(head, dtype=np.float64)
        if head.shape != (self.feature_dim + 1,):
            raise ShapeError(f"head block must have length {self.feature_dim + 1}")
        return RegressionNet(self.extractor, head[:-1].copy(), float(head[-1]))


@dataclass
class RegressionCache:
    x: np.ndarray
    layers: list
    features: np.ndarray


def init_regression_net(
    rng: SeededRng, input_dim: int, hidden_dims, feature_dim: int
) -> RegressionNet:
    hidden_dims = list(hidden_dims)
    if not hidden_dims:
        raise ParameterError("the feature extractor needs at least one hidden layer")
    dims = [input_dim, *hidden_dims, feature_dim]
    if any(int(d) < 1 for d in dims):
        raise ParameterError(f"all layer dims must be >= 1, got {dims}")
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w, b = _he_layer(rng, fan_in, fan_out)
        ws.append(w)
        bs.append(b)
    extractor = MlpParams(tuple(ws), tuple(bs), (RELU,) * len(ws))
    head_w = gauss_sample(rng, 1, feature_dim, 0.0, np.sqrt(2.0 / feature_dim))[0]
    return RegressionNet(extractor, head_w, 0.0)


def forward_regression(net: RegressionNet, x_batch: np.ndarray):
    """Returns ``(features, predictions, cache)``."""
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected batch with {net.input_dim} columns, got shape {x.shape}")
    h, layers = _mlp_forward(net.extractor, x)
    r = check_finite(h @ net.head_w + net.head_b, "regression output")
    return h, r, RegressionCache(x, layers, h)


def predict(net: RegressionNet, x_batch: np.ndarray) -> np.ndarray:
    return forward_regression(net, x_batch)[1]


def backward_regression(net: RegressionNet, cache: RegressionCache, output_grads) -> RegressionNet:
    """Gradient of a loss w.r.t. all parameters given dL/dprediction per sample."""
    g = np.asarray(output_grads, dtype=np.float64)
    if g.shape != (cache.features.shape[0],) or cache.features.shape[1] != net.feature_dim:
        raise ShapeError(
            f"output grads {g.shape} incompatible with cached features {cache.features.shape}"
        )
    gw = cache.features.T @ g
    gb = float(g.sum())
    gh = np.outer(g, net.head_w)
    gext, _ = _mlp_backward(net.extractor, cache.layers, gh)
    return RegressionNet(gext, gw, gb)


def jvp_regression(net: RegressionNet, cache: RegressionCache, direction: RegressionNet) -> np.ndarray:
    """Per-sample ``<d prediction / d theta, direction>`` via forward mode."""
    dh = _mlp_jvp(net.extractor, cache.layers, direction.extractor)
    return dh @ net.head_w + cache.features @ direction.head_w + direction.head_b


# ------------------------------------------------------------- uncertainty


@dataclass(frozen=True)
class UncertaintyLearner:
    """One-hidden-layer MLP mapping (prediction, pseudo-label) to log-variance.

    ``center``/``scale`` standardize both inputs and are fixed for the run;
    they are not trainable.
    """

    params: MlpParams
    z_max: float
    center: float = 0.0
    scale: float = 1.0

    @property
    def size(self) -> int:
        return self.params.size

    def flat(self) -> np.ndarray:
        return self.params.flat()

    def unflatten(self, vec: np.ndarray) -> "UncertaintyLearner":
        return UncertaintyLearner(self.params.unflatten(vec), self.z_max, self.center, self.scale)


@dataclass
class UncertaintyCache:
    layers: list
    z_raw: np.ndarray
    active: np.ndarray = field(repr=False)


def init_uncertainty_learner(
    rng: SeededRng,
    hidden: int = 16,
    z_max: float = 6.0,
    center: float = 0.0,
    scale: float = 1.0,
) -> UncertaintyLearner:
    if hidden < 1:
        raise ParameterError(f"hidden width must be >= 1, got {hidden}")
    if not z_max > 0:
        raise ParameterError(f"z_max must be > 0, got {z_max}")
    if not scale > 0:
        raise ParameterError(f"scale must be > 0, got {scale}")
    w0 = gauss_sample(rng, 2, hidden, 0.0, 0.01)
    # zero output layer: z == 0 (sigma^2 == 1) for every input at init
    params = MlpParams(
        (w0, np.zeros((hidden, 1))),
        (np.zeros(hidden), np.zeros(1)),
        (RELU, IDENTITY),
    )
    return UncertaintyLearner(params, float(z_max), float(center), float(scale))


def forward_uncertainty(
    ul: UncertaintyLearner,
    r,
    y_hat,
    target_mean: float | None = None,
    target_std: float | None = None,
    *,
    with_cache: bool = False,
):
    """Log-variance ``z`` per sample, clamped to ``[-z_max, z_max]``.

    Standardization defaults to the learner's own ``center``/``scale``.
    """
    mean = ul.center if target_mean is None else target_mean
    std = ul.scale if target_std is None else target_std
    if not std > 0:
        raise ParameterError(f"target_std must be > 0, got {std}")
    r = np.asarray(r, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if r.shape != y_hat.shape or r.ndim != 1:
        raise ShapeError(f"prediction {r.shape} and pseudo-label {y_hat.shape} shapes differ")
    u = np.column_stack([(r - mean) / std, (y_hat - mean) / std])
    out, layers = _mlp_forward(ul.params, u)
    z_raw = out[:, 0]
    z = np.clip(z_raw, -ul.z_max, ul.z_max)
    if with_cache:
        return z, UncertaintyCache(layers, z_raw, np.abs(z_raw) < ul.z_max)
    return z


def backward_uncertainty(ul: UncertaintyLearner, cache: UncertaintyCache, z_grads) -> UncertaintyLearner:
    """phi-gradient given dL/dz per sample; clamped samples contribute nothing."""
    g = np.asarray(z_grads, dtype=np.float64)
    if g.shape != cache.z_raw.shape:
        raise ShapeError(f"z grads {g.shape} do not match cached batch {cache.z_raw.shape}")
    g = np.where(cache.active, g, 0.0)
    grad, _ = _mlp_backward(ul.params, cache.layers, g[:, None])
    return UncertaintyLearner(grad, ul.z_max, ul.center, ul.scale)
