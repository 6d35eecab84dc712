"""Training loop, method variants, evaluation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bilevel
from .data import AugmentConfig, LabeledSet, Splits, feature_scale, get_tri_batch, standardize_features
from .diagnostics import CorruptionSpec, corrupt_pseudo_labels, uncertainty_probe, uncertainty_separation
from .errors import BssrError, CheckpointError, ConfigError, NumericError, ParameterError
from .metrics import MetricsRecord, metrics_record, sigma_error_spearman
from .models import (
    IDENTITY,
    RELU,
    MlpParams,
    RegressionNet,
    UncertaintyLearner,
    backward_uncertainty,
    init_regression_net,
    init_uncertainty_learner,
    predict,
)
from .numerics import SeededRng
from .objectives import InnerLossBreakdown, inner_loss

log = logging.getLogger(__name__)

METHODS = ("supervised", "fully_supervised", "fixed_sigma", "joint_ul", "bilevel")


@dataclass(frozen=True)
class RunConfig:
    method: str = "bilevel"
    gamma: float = 0.1
    lam: float = 1.0
    alpha: float = 1e-3
    alpha_extractor: float | None = None
    beta: float = 1e-3
    T: int = 2000
    n: int = 32
    m: int = 32
    hidden_dims: tuple[int, ...] = (32, 32)
    feature_dim: int = 16
    ul_hidden: int = 16
    z_max: float = 6.0
    aug: AugmentConfig = AugmentConfig()
    corruption: CorruptionSpec | None = None
    seed: int = 0
    eval_every: int = 100
    lambda_warmup: bool = False
    loss_reduction: str = "sum"
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    standardize: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.n < 1 or self.m < 0:
            raise ConfigError("batch sizes must satisfy n >= 1, m >= 0")
        rates = [self.lam, self.alpha] + ([self.alpha_extractor] if self.alpha_extractor is not None else [])
        if self.method == "bilevel" or self.method == "joint_ul":
            rates.append(self.beta)
        if any(not r > 0 for r in rates):
            raise ConfigError("lam, alpha and beta must all be > 0")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError("loss_reduction must be 'sum' or 'mean'")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class EvalRecord:
    iteration: int
    l_sup: float
    l_unsup_fit: float
    l_unsup_reg: float
    val_mae: float
    val_mse: float
    val_r2: float
    alignment: float
    mean_z: float
    spearman: float


@dataclass
class RunLog:
    config: RunConfig
    records: list[EvalRecord] = field(default_factory=list)
    final_val: MetricsRecord | None = None
    final_test: MetricsRecord | None = None
    uncertainty: dict = field(default_factory=dict)
    diverged: bool = False
    error: str = ""
    wall_clock: float = 0.0
    learner: UncertaintyLearner | None = field(default=None, repr=False)


def evaluate(net: RegressionNet, split: LabeledSet) -> MetricsRecord:
    if len(split) == 0:
        raise ParameterError("cannot evaluate on an empty split")
    return metrics_record(predict(net, split.x), split.y)


def _probe_stats(net, ul, splits: Splits, cfg: RunConfig, scale, rng: SeededRng):
    tl = splits.train_labeled
    probe = uncertainty_probe(net, ul, splits.train_unlabeled, cfg.aug, rng, cfg.corruption, tl.target_mean, tl.target_std, scale)
    if probe.z.size == 0:
        return probe, math.nan, math.nan
    try:
        rho = sigma_error_spearman(probe.sigma_sq, probe.abs_err)
    except BssrError:
        rho = math.nan
    return probe, float(np.mean(probe.z)), rho


def _joint_phi_grad(ul: UncertaintyLearner, record: bilevel.InnerStepRecord, batch, lam: float):
    """phi-gradient of the inner loss alone: dL/dz_j = lam (1 - exp(-z_j) d_j^2)."""
    d = record.residual
    dz = lam * (1.0 - np.exp(-record.z) * d * d)
    return backward_uncertainty(ul, record.ul_cache, dz)


def train(cfg: RunConfig, splits: Splits):
    """Run one configuration. Returns ``(final net, RunLog)``; the final
    uncertainty-learner (if any) is on ``RunLog.learner``.
    """
    t0 = time.perf_counter()
    if cfg.standardize:
        splits = standardize_features(splits)
    rng = SeededRng(cfg.seed)
    diag_root = rng.spawn(1)
    labeled = splits.train_labeled
    unlabeled = splits.train_unlabeled
    if cfg.method == "fully_supervised":
        rev = unlabeled.revealed()
        labeled = LabeledSet(np.vstack([labeled.x, rev.x]), np.concatenate([labeled.y, rev.y]), np.concatenate([labeled.rows, rev.rows]))
    uses_unlabeled = cfg.method in ("fixed_sigma", "joint_ul", "bilevel")
    m = cfg.m if uses_unlabeled else 0
    if len(labeled) < 2 * cfg.n:
        raise ConfigError(f"{len(labeled)} labeled rows cannot fill two disjoint batches of {cfg.n}")
    if m and len(unlabeled) < m:
        raise ConfigError(f"{len(unlabeled)} unlabeled rows cannot fill a batch of {m}")

    input_dim = splits.train_labeled.x.shape[1]
    net = init_regression_net(rng, input_dim, cfg.hidden_dims, cfg.feature_dim)
    ul = None
    if cfg.method in ("joint_ul", "bilevel"):
        ul = init_uncertainty_learner(rng, cfg.ul_hidden, cfg.z_max, labeled.target_mean, labeled.target_std)
    scale = feature_scale(np.vstack([splits.train_labeled.x, unlabeled.x]))

    alpha, alpha_ext, beta = cfg.alpha, cfg.alpha_extractor, cfg.beta
    lam_scale = 1.0
    if cfg.loss_reduction == "mean":
        alpha, beta = alpha / cfg.n, beta / cfg.n
        alpha_ext = None if alpha_ext is None else alpha_ext / cfg.n
        lam_scale = cfg.n / m if m else 1.0

    runlog = RunLog(cfg)
    warm = max(1, int(0.1 * cfg.T))
    # overflow surfaces as NumericError from the finiteness checks
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, cfg.T + 1):
                lam = cfg.lam * lam_scale
                if cfg.lambda_warmup:
                    lam *= min(1.0, t / warm)
                batch = get_tri_batch(rng, labeled, unlabeled, cfg.n, m, cfg.aug, net, scale)
                if m and cfg.corruption is not None and cfg.corruption.fraction > 0:
                    batch = corrupt_pseudo_labels(batch, cfg.corruption, rng)
                eval_now = t % cfg.eval_every == 0 or t == cfg.T
                if eval_now:
                    if m:
                        bd = inner_loss(net, ul, batch, lam)
                    else:
                        bd = inner_loss(net, None, batch, 0.0)
                    align = bilevel.alignment_score(net, ul, batch, lam if m else 0.0)

                if cfg.method == "bilevel":
                    new_net, rec = bilevel.inner_step(net, ul, batch, lam, alpha, alpha_ext)
                    hg = bilevel.hypergradient_phi(rec, new_net, ul, batch, lam)
                    ul = bilevel.outer_step(ul, hg, beta)
                    net = new_net
                elif cfg.method == "joint_ul":
                    new_net, rec = bilevel.inner_step(net, ul, batch, lam, alpha, alpha_ext)
                    ul = bilevel.outer_step(ul, _joint_phi_grad(ul, rec, batch, lam), beta)
                    net = new_net
                else:
                    net, _ = bilevel.inner_step(net, None, batch, lam if m else 0.0, alpha, alpha_ext)

                if eval_now:
                    val = evaluate(net, splits.val)
                    _, mean_z, rho = _probe_stats(net, ul, splits, cfg, scale, diag_root.spawn(t))
                    if not m:
                        mean_z, rho = math.nan, math.nan
                    rec_ = EvalRecord(t, bd.l_sup, bd.l_unsup_fit, bd.l_unsup_reg, val.mae, val.mse, val.r2, align, mean_z, rho)
                    if not all(math.isfinite(v) for v in (bd.total, val.mse, align)):
                        raise NumericError(f"non-finite loss at iteration {t}")
                    runlog.records.append(rec_)
    except (NumericError, FloatingPointError) as exc:
        runlog.diverged = True
        runlog.error = f"diverged: {exc}"
        log.warning("run %s seed %d %s", cfg.method, cfg.seed, runlog.error)

    if not runlog.diverged:
        runlog.final_val = evaluate(net, splits.val)
        runlog.final_test = evaluate(net, splits.test)
        runlog.uncertainty = final_uncertainty(net, ul, splits, cfg, scale, diag_root.spawn(0))
    runlog.learner = ul
    runlog.wall_clock = time.perf_counter() - t0
    return net, runlog


def final_uncertainty(net, ul, splits: Splits, cfg: RunConfig, scale, rng: SeededRng) -> dict:
    """Post-training probe of learned log-variances over the unlabeled pool."""
    if ul is None:
        return {}
    probe, mean_z, rho = _probe_stats(net, ul, splits, cfg, scale, rng)
    out = {"mean_z": mean_z, "spearman_all": rho}
    mask = probe.corrupted
    if mask.any() and not mask.all():
        zc, zk, gap = uncertainty_separation(probe.z, mask)
        out.update(mean_z_corrupted=zc, mean_z_clean=zk, gap=gap)
        try:
            out["spearman_corrupted"] = sigma_error_spearman(probe.sigma_sq[mask], probe.abs_err[mask])
        except BssrError:
            out["spearman_corrupted"] = math.nan
    return out


# ------------------------------------------------------------ checkpoints
#
# Layout (little-endian):
#   8 bytes   magic b"BSSRCKPT"
#   u32       format version
#   32 bytes  config hash (sha256 digest, zeros if unknown)
#   u32       number of arrays
#   per array: u16 name length, name (utf-8), u8 ndim, u32 * ndim dims,
#              float64 * prod(dims) data
#   u32       crc32 of everything above

MAGIC = b"BSSRCKPT"
VERSION = 1


def _arrays(net: RegressionNet, ul: UncertaintyLearner | None):
    out = []
    for k, (w, b) in enumerate(zip(net.extractor.weights, net.extractor.biases)):
        out += [(f"ext.W{k}", w), (f"ext.b{k}", b)]
    out += [("head.w", net.head_w), ("head.b", np.array([net.head_b]))]
    if ul is not None:
        for k, (w, b) in enumerate(zip(ul.params.weights, ul.params.biases)):
            out += [(f"ul.W{k}", w), (f"ul.b{k}", b)]
        out.append(("ul.meta", np.array([ul.z_max, ul.center, ul.scale])))
    return out


def checkpoint_bytes(net: RegressionNet, ul: UncertaintyLearner | None = None, config_hash: str = "") -> bytes:
    digest = bytes.fromhex(config_hash) if config_hash else bytes(32)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a sha256 hex digest")
    arrays = _arrays(net, ul)
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION) + digest + struct.pack("<I", len(arrays))
    for name, a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
        buf += struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def checkpoint_save(net: RegressionNet, ul: UncertaintyLearner | None, path, config_hash: str = "") -> None:
    Path(path).write_bytes(checkpoint_bytes(net, ul, config_hash))


def _parse(blob: bytes):
    if len(blob) < 52 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if struct.unpack("<I", blob[-4:])[0] != zlib.crc32(blob[:-4]):
        raise CheckpointError("checksum mismatch; file is corrupt")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    digest = blob[12:44].hex()
    (count,) = struct.unpack_from("<I", blob, 44)
    pos, arrays = 48, {}
    body = len(blob) - 4
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", blob, pos)
            dims = struct.unpack_from(f"<{ndim}I", blob, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(dims)) * 8
            if pos + size > body:
                raise CheckpointError(f"array {name!r} runs past the end of the file")
            arrays[name] = np.frombuffer(blob, "<f8", int(np.prod(dims)), pos).reshape(dims).astype(np.float64)
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != body:
        raise CheckpointError("trailing bytes after the last array")
    return digest, arrays


def checkpoint_load(path):
    """Returns ``(net, ul)``; ``ul`` is None if the file holds no learner."""
    digest, a = _parse(Path(path).read_bytes())
    try:
        k = 0
        ws, bs = [], []
        while f"ext.W{k}" in a:
            ws.append(a[f"ext.W{k}"])
            bs.append(a[f"ext.b{k}"])
            k += 1
        if not ws:
            raise CheckpointError("checkpoint has no extractor layers")
        ext = MlpParams(tuple(ws), tuple(bs), (RELU,) * len(ws))
        head_w, head_b = a["head.w"], a["head.b"]
        if head_w.shape != (ext.dims[-1],) or head_b.shape != (1,):
            raise CheckpointError(f"head shape {head_w.shape} does not match feature dim {ext.dims[-1]}")
        net = RegressionNet(ext, head_w, float(head_b[0]))
        ul = None
        if "ul.W0" in a:
            p = MlpParams((a["ul.W0"], a["ul.W1"]), (a["ul.b0"], a["ul.b1"]), (RELU, IDENTITY))
            if p.dims[0] != 2 or p.dims[-1] != 1:
                raise CheckpointError(f"uncertainty-learner dims {p.dims} must be 2 -> H -> 1")
            z_max, center, scale = a["ul.meta"]
            ul = UncertaintyLearner(p, float(z_max), float(center), float(scale))
    except KeyError as exc:
        raise CheckpointError(f"missing array {exc}") from None
    except (ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"inconsistent dims in checkpoint: {exc}") from None
    return net, ul


def checkpoint_config_hash(path) -> str:
    return _parse(Path(path).read_bytes())[0]
