"""Dense float64 linear algebra and seeded sampling.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64 in C
(row-major) order. The helpers here add the shape and finiteness checks the
rest of the package relies on.

Randomness comes from :class:`SeededRng`, a thin wrapper around numpy's
counter-based Philox4x64-10 bit generator. Nothing in the package touches
numpy's global random state.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

DenseMatrix = np.ndarray


def as_matrix(a, name: str = "matrix") -> DenseMatrix:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")
    return a


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return check_finite(a @ b, "matmul result")


def dot(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeError(f"dot of lengths {u.size} and {v.size}")
    return float(check_finite(np.dot(u, v), "dot result"))


def _relu(m):
    return np.maximum(m, 0.0)


def _relu_derivative(m):
    return (m > 0.0).astype(np.float64)


_ELEM_FUNCS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": _relu,
    "relu_derivative": _relu_derivative,
    "exp": np.exp,
    "neg_exp": lambda m: np.exp(-m),
}


def elem_map(m: np.ndarray, f: str) -> np.ndarray:
    """Apply one of ``relu``, ``relu_derivative``, ``exp``, ``neg_exp`` entrywise."""
    try:
        fn = _ELEM_FUNCS[f]
    except KeyError:
        raise ParameterError(f"unknown elementwise function {f!r}") from None
    m = np.asarray(m, dtype=np.float64)
    check_finite(m, f"{f} input")
    with np.errstate(over="ignore"):
        out = fn(m)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{f} overflowed the float64 range")
    return out


class SeededRng:
    """Deterministic random stream keyed by a 64-bit seed.

    Uses Philox4x64-10, whose output for a given key is fixed by its
    published definition, so identical seeds replay identical streams.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, *tags: int) -> "SeededRng":
        """Independent child stream; does not advance this one."""
        mixed = np.random.SeedSequence([self.seed, *tags]).generate_state(1, np.uint64)[0]
        return SeededRng(int(mixed))

    def normal(self, size, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return mean + std * self.gen.standard_normal(size)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n)."""
        return self.gen.choice(n, size=k, replace=False)


def gauss_sample(rng: SeededRng, rows: int, cols: int, mean: float, std: float) -> DenseMatrix:
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if rows < 0 or cols < 0:
        raise ParameterError(f"invalid shape ({rows}, {cols})")
    return np.ascontiguousarray(rng.normal((rows, cols), mean, std))
