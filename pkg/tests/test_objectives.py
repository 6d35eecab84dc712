import math

import numpy as np
import pytest

from bssr.diagnostics import InstanceSpec, central_difference, random_instance, rel_err
from bssr.errors import NumericError, ParameterError
from bssr.models import IDENTITY, RELU, MlpParams, RegressionNet, UncertaintyLearner
from bssr.objectives import (
    grad_inner_theta, grad_outer_theta, inner_loss, inner_state, outer_loss, supervised_loss, unsup_nll,
)

from conftest import make_batch


def test_supervised_loss_cases():
    assert supervised_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert supervised_loss([1.0, 2.0], [0.0, 0.0]) == 5.0
    r = np.array([0.3, -1.2, 2.0])
    assert supervised_loss(2 * r, np.zeros(3)) == pytest.approx(4 * supervised_loss(r, np.zeros(3)), rel=1e-15)
    with pytest.raises(ParameterError):
        supervised_loss([], [])


def test_unsup_nll_degrades_to_sse_bit_exact():
    rng = np.random.default_rng(0)
    r, y = rng.normal(size=50), rng.normal(size=50)
    assert unsup_nll(r, y, np.zeros(50)) == supervised_loss(r, y)


def test_unsup_nll_hand_values():
    assert unsup_nll([1.0], [1.0], [math.log(4)]) == pytest.approx(1.3862943611198906, abs=1e-15)
    assert unsup_nll([0.0], [2.0], [math.log(4)]) == pytest.approx(2.3862943611198906, abs=1e-15)
    with pytest.raises(NumericError):
        unsup_nll([0.0], [1.0], [np.inf])


@pytest.mark.parametrize("d", [0.1, 1.0, 3.0])
def test_unsup_nll_minimizer(d):
    grid = np.linspace(-8, 8, 160_001)
    vals = np.exp(-grid) * d * d + grid
    k = int(np.argmin(vals))
    assert grid[k] == pytest.approx(math.log(d * d), abs=2e-4)
    assert vals[k] == pytest.approx(1 + math.log(d * d), abs=1e-8)


def _unit_net():
    # 1 -> 1 -> 1 extractor with unit weights, head 2h + 0.5: f(x) = 2x + 0.5 for x >= 0
    ext = MlpParams((np.ones((1, 1)), np.ones((1, 1))), (np.zeros(1), np.zeros(1)), (RELU, RELU))
    return RegressionNet(ext, np.array([2.0]), 0.5)


def _const_learner(z):
    p = MlpParams((np.zeros((2, 2)), np.zeros((2, 1))), (np.zeros(2), np.array([z])), (RELU, IDENTITY))
    return UncertaintyLearner(p, 6.0)


def _hand_batch():
    return make_batch([[1.0], [2.0]], [3.0, 4.0], [[0.5], [1.0]], [[0.5], [1.0]], [[0.0], [3.0]], [0.0, 6.0], [2.5, 2.5])


def test_inner_loss_hand_case():
    # labeled preds 2.5, 4.5 -> 0.25 + 0.25; strong preds 1.5, 2.5 vs 2.5 -> d = (1, 0)
    b = _hand_batch()
    bd = inner_loss(_unit_net(), _const_learner(math.log(4)), b, 1.0)
    assert bd.l_sup == 0.5
    assert bd.l_unsup_fit == pytest.approx(0.25, abs=1e-16)
    assert bd.l_unsup_reg == pytest.approx(2 * math.log(4), abs=1e-15)
    assert bd.total == bd.l_sup + bd.lam * (bd.l_unsup_fit + bd.l_unsup_reg)
    assert bd.total == pytest.approx(0.5 + 0.25 + 2 * math.log(4), abs=1e-14)


def test_inner_loss_lambda_zero_and_empty_unlabeled():
    b = _hand_batch()
    assert inner_loss(_unit_net(), _const_learner(1.0), b, 0.0).total == 0.5
    b0 = make_batch([[1.0], [2.0]], [3.0, 4.0], np.zeros((0, 1)), np.zeros((0, 1)), [[0.0], [3.0]], [0.0, 6.0], [])
    bd = inner_loss(_unit_net(), _const_learner(1.0), b0, 5.0)
    assert bd.total == bd.l_sup == 0.5


def test_outer_loss_hand_and_errors():
    b = _hand_batch()
    # preds 0.5, 6.5 vs 0, 6
    assert outer_loss(_unit_net(), b) == 0.5
    b3 = make_batch([[1.0]], [1.0], [[1.0]], [[1.0]], [[0.0], [1.0], [2.0]], [0.5, 2.0, 4.0], [1.0])
    # preds 0.5, 2.5, 4.5 -> 0 + 0.25 + 0.25
    assert outer_loss(_unit_net(), b3) == 0.5
    perfect = make_batch([[1.0]], [1.0], [[1.0]], [[1.0]], [[0.0], [1.0]], [0.5, 2.5], [1.0])
    assert outer_loss(_unit_net(), perfect) == 0.0
    assert not grad_outer_theta(_unit_net(), perfect).flat().any()


def test_head_bias_gradient_formula():
    net, ul, b = random_instance(1)
    st = inner_state(net, ul, b)
    lam = 0.7
    g = grad_inner_theta(net, ul, b, lam)
    expect = np.sum(2 * (st.pred_l - b.y_l)) + 2 * lam * np.sum(np.exp(-st.z) * (st.r_u - b.pseudo_labels))
    assert g.head_b == pytest.approx(expect, rel=1e-12)


def test_lambda_zero_is_supervised_gradient():
    net, ul, b = random_instance(2)
    a = grad_inner_theta(net, ul, b, 0.0).flat()
    s = grad_inner_theta(net, None, b, 0.0).flat()
    np.testing.assert_array_equal(a, s)


@pytest.mark.parametrize("seed", range(20))
def test_theta_gradients_match_fd(seed):
    net, ul, b = random_instance(seed, InstanceSpec(n=3 + seed % 6, m=3 + (seed * 7) % 6))
    lam = 0.5 + 0.1 * seed
    z = inner_state(net, ul, b).z
    theta = net.flat()
    fd_in = central_difference(lambda t: inner_loss(net.unflatten(t), None, b, lam, z=z).total, theta, 1e-6)
    assert rel_err(grad_inner_theta(net, ul, b, lam).flat(), fd_in) <= 1e-6
    fd_out = central_difference(lambda t: outer_loss(net.unflatten(t), b), theta, 1e-6)
    assert rel_err(grad_outer_theta(net, b).flat(), fd_out) <= 1e-6


def test_dz_sign_rule():
    r, y = np.array([0.0]), np.array([2.0])
    for z0, increasing in ((0.0, False), (2.0, True)):   # d^2 = 4 vs e^z0
        lo = unsup_nll(r, y, [z0 - 1e-3])
        hi = unsup_nll(r, y, [z0 + 1e-3])
        assert (hi > lo) == increasing
