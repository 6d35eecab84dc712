import numpy as np
import pytest

from bssr.data import TriBatch
from bssr.diagnostics import (
    CorruptionSpec, FdConfig, central_difference, corrupt_pseudo_labels, cosine, fd_grad_theta,
    fd_hypergrad_phi, oracle_checks, random_instance, rel_err, uncertainty_separation,
)
from bssr.errors import NumericError, ParameterError
from bssr.numerics import SeededRng


def test_fd_quadratic_constant_linear():
    theta = np.array([0.3, -1.2, 2.5])
    assert rel_err(fd_grad_theta(lambda t: float(t @ t), theta), 2 * theta) <= 1e-8
    assert not fd_grad_theta(lambda t: 4.0, theta).any()
    c = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(fd_grad_theta(lambda t: float(c @ t), theta), c, rtol=0, atol=1e-9)


def test_fd_non_finite_names_coordinate():
    with pytest.raises(NumericError, match="coordinate 1"):
        central_difference(lambda t: 0.0 if t[1] >= 0 else np.inf, np.array([1.0, 0.0]), 1e-6)
    with pytest.raises(ParameterError):
        FdConfig(step=0.0)


def test_rel_err_and_cosine():
    assert rel_err([1e-9], [2e-9]) == pytest.approx(1e-9)
    assert rel_err([100.0], [101.0]) == pytest.approx(1 / 101)
    assert cosine([1, 0], [0, 2]) == 0.0
    assert cosine([1, 1], [2, 2]) == pytest.approx(1.0)


def test_fd_hypergrad_lambda_zero():
    net, ul, b = random_instance(0)
    for mode in ("head_only", "full"):
        assert np.max(np.abs(fd_hypergrad_phi(net, ul, b, 0.0, 1e-3, mode))) < 1e-9
    with pytest.raises(ParameterError):
        fd_hypergrad_phi(net, ul, b, 1.0, 1e-3, "extractor_only")


def _batch(m, rng):
    y = rng.normal(m)
    z = np.zeros((m, 1))
    return TriBatch(z[:2], y[:2], z, z, z[:2], y[:2], y, np.arange(2), np.arange(m), np.arange(2, 4), 0.5, 2.0)


def test_corruption_trivial_cases():
    rng = SeededRng(0)
    b = _batch(50, rng)
    out = corrupt_pseudo_labels(b, CorruptionSpec(0.0), rng)
    assert out.pseudo_labels.tobytes() == b.pseudo_labels.tobytes() and not out.corrupted.any()
    out = corrupt_pseudo_labels(b, CorruptionSpec(1.0, 0.0, "offset"), rng)
    assert out.pseudo_labels.tobytes() == b.pseudo_labels.tobytes() and out.corrupted.all()


def test_corruption_modes_and_untouched_entries():
    rng = SeededRng(1)
    b = _batch(200, rng)
    for mode in ("offset", "sign_flip_residual", "uniform_replace"):
        out = corrupt_pseudo_labels(b, CorruptionSpec(0.5, 3.0, mode), rng)
        c = out.corrupted
        assert out.pseudo_labels[~c].tobytes() == b.pseudo_labels[~c].tobytes()
        if mode == "offset":
            np.testing.assert_allclose(out.pseudo_labels[c], b.pseudo_labels[c] + 6.0)
        elif mode == "sign_flip_residual":
            np.testing.assert_allclose(out.pseudo_labels[c], 1.0 - b.pseudo_labels[c])
        else:
            assert np.all(np.abs(out.pseudo_labels[c] - 0.5) <= 6.0)


def test_corruption_fraction():
    rng = SeededRng(2)
    b = _batch(32, rng)
    hits = sum(corrupt_pseudo_labels(b, CorruptionSpec(0.3), rng).corrupted.sum() for _ in range(1000))
    assert abs(hits / 32_000 - 0.30) <= 0.03


def test_corruption_spec_validation():
    with pytest.raises(ParameterError):
        CorruptionSpec(1.5)
    with pytest.raises(ParameterError):
        CorruptionSpec(0.1, 1.0, "scramble")


def test_uncertainty_separation():
    assert uncertainty_separation([0.7, 0.7, 0.7], [True, False, False])[2] == 0.0
    zc, zk, gap = uncertainty_separation([2.0, 4.0, 1.0, 0.0, -1.0], [True, True, False, False, False])
    assert (zc, zk, gap) == (3.0, 0.0, 3.0)
    with pytest.raises(ParameterError):
        uncertainty_separation([1.0, 2.0], [False, False])


def test_oracle_checks_deterministic():
    a, b = oracle_checks(7), oracle_checks(7)
    assert a == b
    assert a.inner_theta_err <= 1e-6 and a.outer_theta_err <= 1e-6 and a.head_only_err <= 1e-6
