import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bssr.errors import ParameterError, UndefinedMetricError
from bssr.metrics import mae, metrics_record, mse, r2, sigma_error_spearman, subgroup_std, target_bins

floats = st.floats(-1e3, 1e3, allow_nan=False)


def test_mae_mse_examples():
    assert mae([1, 3], [0, 0]) == 2.0
    assert mse([1, 3], [0, 0]) == 5.0
    assert mae([2, 5], [2, 5]) == mse([2, 5], [2, 5]) == 0.0
    assert mae([1 + 7, 3 + 7], [7, 7]) == 2.0
    r = np.array([0.5, -1.0, 2.0])
    assert mse(2 * r, np.zeros(3)) == pytest.approx(4 * mse(r, np.zeros(3)), rel=1e-15)
    with pytest.raises(ParameterError):
        mae([], [])


def test_r2_examples():
    y = np.array([1.0, 2.0, 4.0])
    assert r2(y, y) == 1.0
    assert r2(np.full(3, y.mean()), y) == 0.0
    assert r2([0, 0], [-1, 1]) == 0.0
    with pytest.raises(UndefinedMetricError):
        r2([1, 2], [3, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(floats, floats), min_size=1, max_size=30))
def test_jensen(pairs):
    p, t = np.array(pairs).T
    rec = metrics_record(p, t) if np.ptp(t) > 0 else None
    assert mae(p, t) ** 2 <= mse(p, t) * (1 + 1e-12) + 1e-12
    if rec is not None:
        assert rec.r2 <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(floats, floats), min_size=2, max_size=30), st.floats(-100, 100))
def test_r2_shift_invariant(pairs, c):
    p, t = np.array(pairs).T
    if np.ptp(t) < 1e-3:
        return
    assert r2(p + c, t + c) == pytest.approx(r2(p, t), rel=1e-6, abs=1e-6)


def test_subgroup_std():
    out = subgroup_std([1.0, 3.0, 2.0, 2.0, 5.0], ["a", "a", "b", "b", "c"])
    assert out == {"a": 1.0, "b": 0.0}


def test_target_bins():
    np.testing.assert_array_equal(target_bins([0.0, 0.24, 0.25, -0.01]), [0, 0, 1, -1])


def test_spearman_examples():
    assert sigma_error_spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
    assert sigma_error_spearman([1, 2, 3, 4], [40, 30, 20, 10]) == -1.0
    assert sigma_error_spearman([1, 2, 3], [2, 1, 3]) == 0.5


def test_spearman_errors():
    with pytest.raises(UndefinedMetricError):
        sigma_error_spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ParameterError):
        sigma_error_spearman([1, 2], [1, 2])


def test_spearman_ties_average_rank():
    # ranks a = (1.5, 1.5, 3), b = (1, 2, 3): pearson of centered ranks = 1.5 / sqrt(0.5 * 2)
    assert sigma_error_spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(np.sqrt(3) / 2, abs=1e-15)


@settings(max_examples=50, deadline=None)
# integer data keeps the transforms strictly monotone in floating point
@given(st.lists(st.tuples(st.integers(1, 1000), st.integers(0, 1000)), min_size=3, max_size=30))
def test_spearman_monotone_invariance(pairs):
    a, b = np.array(pairs, dtype=float).T
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return
    base = sigma_error_spearman(a, b)
    assert sigma_error_spearman(np.log(a), b ** 3 + 1) == pytest.approx(base, abs=1e-12)
