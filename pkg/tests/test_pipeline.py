import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest

from bssr.data import SplitConfig, feature_scale, get_tri_batch, split, standardize_features, synth_generate
from bssr.diagnostics import CorruptionSpec
from bssr.errors import CheckpointError, ConfigError, ParameterError
from bssr.models import RegressionNet, init_regression_net, init_uncertainty_learner, predict
from bssr.numerics import SeededRng
from bssr.pipeline import (
    RunConfig, checkpoint_bytes, checkpoint_config_hash, checkpoint_load, checkpoint_save, evaluate, train,
)
from bssr.data import AugmentConfig, LabeledSet

SMALL = dict(T=20, n=8, m=8, hidden_dims=(8,), feature_dim=4, ul_hidden=4, eval_every=5)


@pytest.fixture(scope="module")
def splits():
    ds = synth_generate(SeededRng(12345), 400)
    return split(ds, SplitConfig(0.2, 0))


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(T=0)
    with pytest.raises(ConfigError):
        RunConfig(method="magic")
    with pytest.raises(ConfigError):
        RunConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        RunConfig(method="bilevel", beta=0.0)
    RunConfig(method="fixed_sigma", beta=0.0)  # beta unused outside bilevel/joint_ul
    assert RunConfig().hash() == RunConfig().hash() != RunConfig(seed=1).hash()


def test_t1_one_update_and_one_record(splits):
    _, log = train(RunConfig(method="bilevel", **{**SMALL, "T": 1}), splits)
    assert [r.iteration for r in log.records] == [1]
    init = init_uncertainty_learner(SeededRng(0), 4)
    assert log.learner.flat().tobytes() != init.flat().tobytes()


def test_fixed_sigma_matches_hand_rolled_self_training_step(splits):
    # no zero-masking: masked inputs sit exactly on a ReLU kink where central
    # differences and the analytic derivative legitimately differ
    cfg = RunConfig(method="fixed_sigma", aug=AugmentConfig(0.05, 0.15, 0.0), **{**SMALL, "T": 1, "alpha": 1e-3})
    net1, _ = train(cfg, splits)

    sp = standardize_features(splits)
    rng = SeededRng(cfg.seed)
    rng.spawn(1)
    net0 = init_regression_net(rng, 1, cfg.hidden_dims, cfg.feature_dim)
    scale = feature_scale(np.vstack([sp.train_labeled.x, sp.train_unlabeled.x]))
    b = get_tri_batch(rng, sp.train_labeled, sp.train_unlabeled, cfg.n, cfg.m, cfg.aug, net0, scale)

    # plain MSE self-training: squared error on labeled rows plus squared error to
    # pseudo-labels on the strong view, one gradient step by central differences
    def forward(theta, x):
        n = net0.unflatten(theta)
        a = x
        for W, bb in zip(n.extractor.weights, n.extractor.biases):
            a = np.maximum(a @ W + bb, 0.0)
        return a @ n.head_w + n.head_b

    def loss(theta):
        return np.sum((b.y_l - forward(theta, b.x_l)) ** 2) + np.sum((b.pseudo_labels - forward(theta, b.x_strong)) ** 2)

    theta = net0.flat()
    g = np.array([(loss(theta + e) - loss(theta - e)) / 2e-6 for e in np.eye(theta.size) * 1e-6])
    expect = theta - cfg.alpha * g
    np.testing.assert_allclose(net1.flat(), expect, rtol=0, atol=1e-9)


def test_supervised_ignores_unlabeled(splits):
    _, log = train(RunConfig(method="supervised", **SMALL), splits)
    assert all(r.l_unsup_fit == 0 and r.l_unsup_reg == 0 for r in log.records)
    assert log.learner is None


def test_fully_supervised_runs(splits):
    _, log = train(RunConfig(method="fully_supervised", **SMALL), splits)
    assert not log.diverged and log.final_test.n == len(splits.test)


def test_determinism(splits):
    cfg = RunConfig(method="bilevel", corruption=CorruptionSpec(0.3), **SMALL)
    a, b = train(cfg, splits)[1], train(cfg, splits)[1]
    assert a.records == b.records
    assert a.uncertainty == b.uncertainty


def test_records_ordered_and_logged(splits):
    _, log = train(RunConfig(method="joint_ul", **SMALL), splits)
    assert [r.iteration for r in log.records] == [5, 10, 15, 20]
    assert all(np.isfinite(r.val_mse) for r in log.records)


def test_divergence_flagged(splits):
    _, log = train(RunConfig(method="fixed_sigma", **{**SMALL, "T": 60, "alpha": 1e6}), splits)
    assert log.diverged and "diverged" in log.error
    assert log.final_test is None


def test_mean_reduction_runs(splits):
    _, log = train(RunConfig(method="bilevel", loss_reduction="mean", **{**SMALL, "alpha": 1e-2}), splits)
    assert not log.diverged


def test_evaluate_cases():
    net = init_regression_net(SeededRng(0), 1, [4], 4)
    y = np.array([1.0, 2.0, 6.0])
    const = RegressionNet(net.extractor.zeros_like(), np.zeros(4), 3.0)
    rec = evaluate(const, LabeledSet(np.zeros((3, 1)), y, np.arange(3)))
    assert rec.r2 == 0.0
    # predictions 3, 3 vs truth 2, 5 -> mae 1.5, mse 2.5, r2 = 1 - 5 / 4.5
    rec = evaluate(const, LabeledSet(np.zeros((2, 1)), np.array([2.0, 5.0]), np.arange(2)))
    assert (rec.mae, rec.mse) == (1.5, 2.5)
    assert rec.r2 == pytest.approx(1 - 5 / 4.5, abs=1e-15)
    with pytest.raises(ParameterError):
        evaluate(const, LabeledSet(np.zeros((0, 1)), np.zeros(0), np.zeros(0, int)))


def _model(seed=0):
    rng = SeededRng(seed)
    net = init_regression_net(rng, 3, [5, 4], 6)
    ul = init_uncertainty_learner(rng, 7, 6.0, 0.3, 1.7)
    return net, ul.unflatten(rng.normal(ul.size))


def test_checkpoint_round_trip(tmp_path):
    net, ul = _model()
    h = RunConfig().hash()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint_save(net, ul, p1, h)
    net2, ul2 = checkpoint_load(p1)
    checkpoint_save(net2, ul2, p2, h)
    assert p1.read_bytes() == p2.read_bytes()
    assert checkpoint_config_hash(p1) == h
    x = SeededRng(3).normal((9, 3))
    assert predict(net, x).tobytes() == predict(net2, x).tobytes()
    assert (ul2.z_max, ul2.center, ul2.scale) == (6.0, 0.3, 1.7)
    net3, ul3 = checkpoint_load(_save(tmp_path, checkpoint_bytes(net)))
    assert ul3 is None and net3.flat().tobytes() == net.flat().tobytes()


def _save(tmp_path, blob, name="x.ckpt"):
    p = tmp_path / name
    p.write_bytes(blob)
    return p


def _refresh_crc(blob: bytes) -> bytes:
    body = blob[:-4]
    return body + struct.pack("<I", zlib.crc32(body))


def test_checkpoint_errors(tmp_path):
    net, ul = _model()
    blob = checkpoint_bytes(net, ul)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_load(_save(tmp_path, b"NOTACKPT" + blob[8:]))
    flipped = bytearray(blob)
    flipped[100] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_load(_save(tmp_path, bytes(flipped)))
    v2 = bytearray(blob)
    v2[8:12] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(_save(tmp_path, _refresh_crc(bytes(v2))))
    bad_head = RegressionNet(net.extractor, np.zeros(3), 0.0)
    with pytest.raises(CheckpointError):
        checkpoint_load(_save(tmp_path, checkpoint_bytes(bad_head)))
    with pytest.raises(CheckpointError):
        checkpoint_load(_save(tmp_path, _refresh_crc(blob[:-40] + blob[-4:])))
