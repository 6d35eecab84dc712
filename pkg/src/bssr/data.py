"""Datasets, synthetic tasks, splits and per-iteration batch assembly."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParameterError, ParseError, SchemaError
from .models import RegressionNet, predict
from .numerics import SeededRng, check_finite

TARGET_COLUMN = "target"
TASKS = ("sine-hetero", "poly-hetero")


@dataclass(frozen=True)
class Dataset:
    """Feature matrix plus targets; NaN marks an unlabeled row."""

    features: np.ndarray
    targets: np.ndarray
    feature_names: tuple[str, ...] = ()
    target_position: int = -1

    def __post_init__(self):
        if self.features.ndim != 2 or self.targets.shape != (self.features.shape[0],):
            raise SchemaError(
                f"features {self.features.shape} and targets {self.targets.shape} disagree"
            )
        check_finite(self.features, "dataset features")
        if not self.feature_names:
            names = tuple(f"x{i + 1}" for i in range(self.features.shape[1]))
            object.__setattr__(self, "feature_names", names)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def labeled_mask(self) -> np.ndarray:
        return ~np.isnan(self.targets)

    @property
    def target_mean(self) -> float:
        return float(np.mean(self.targets[self.labeled_mask]))

    @property
    def target_std(self) -> float:
        return float(np.std(self.targets[self.labeled_mask]))


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray
    y: np.ndarray
    rows: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def target_mean(self) -> float:
        return float(np.mean(self.y))

    @property
    def target_std(self) -> float:
        return float(np.std(self.y))


@dataclass(frozen=True)
class UnlabeledPool:
    """Unlabeled training rows.

    The true targets of rows that were labeled in the source data are kept
    out of band for diagnostics; nothing on the training path reads them.
    """

    x: np.ndarray
    rows: np.ndarray
    _shadow: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return self.x.shape[0]

    def shadow_targets(self) -> np.ndarray:
        return self._shadow.copy()

    def revealed(self) -> LabeledSet:
        keep = ~np.isnan(self._shadow)
        return LabeledSet(self.x[keep], self._shadow[keep], self.rows[keep])


@dataclass(frozen=True)
class Splits:
    train_labeled: LabeledSet
    train_unlabeled: UnlabeledPool
    val: LabeledSet
    test: LabeledSet


@dataclass(frozen=True)
class SplitConfig:
    label_ratio: float = 0.1
    seed: int = 0
    test_fraction: float = 0.2
    val_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.label_ratio <= 1:
            raise ConfigError(f"label_ratio must be in (0, 1], got {self.label_ratio}")
        if self.test_fraction < 0 or self.val_fraction < 0 or self.test_fraction + self.val_fraction >= 1:
            raise ConfigError("test_fraction and val_fraction must be >= 0 and sum to < 1")


@dataclass(frozen=True)
class AugmentConfig:
    """Noise levels are multiples of the per-feature std."""

    weak_noise_std: float = 0.05
    strong_noise_std: float = 0.15
    strong_mask_prob: float = 0.1

    def __post_init__(self):
        if self.weak_noise_std < 0 or self.strong_noise_std < 0:
            raise ConfigError("augmentation noise levels must be >= 0")
        if self.weak_noise_std > self.strong_noise_std:
            raise ConfigError("weak_noise_std must not exceed strong_noise_std")
        if not 0 <= self.strong_mask_prob < 1:
            raise ConfigError("strong_mask_prob must be in [0, 1)")


@dataclass
class TriBatch:
    """Everything one training iteration sees.

    ``x_l, y_l`` is the inner labeled batch, ``x_o, y_o`` the disjoint outer
    labeled batch, ``x_weak``/``x_strong`` two views of the same unlabeled
    rows and ``pseudo_labels`` the current model's predictions on the weak
    view. ``target_mean``/``target_std`` describe the labeled pool.
    """

    x_l: np.ndarray
    y_l: np.ndarray
    x_weak: np.ndarray
    x_strong: np.ndarray
    x_o: np.ndarray
    y_o: np.ndarray
    pseudo_labels: np.ndarray
    idx_l: np.ndarray
    idx_u: np.ndarray
    idx_o: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0
    corrupted: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.x_l.shape[0]

    @property
    def m(self) -> int:
        return self.x_strong.shape[0]


# ------------------------------------------------------------------- CSV


def _parse_float(cell: str, line: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"row {line}, col {col}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(v):
        raise ParseError(f"row {line}, col {col}: non-finite value {cell!r}")
    return v


def load_csv(path) -> Dataset:
    """Read a dataset CSV.

    The header names the columns; exactly one must be ``target``. Empty
    target cells mark unlabeled rows. Row numbers in errors are file line
    numbers, so the first data row is row 2.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        if header.count(TARGET_COLUMN) != 1:
            raise SchemaError(f"{path}: header must contain exactly one '{TARGET_COLUMN}' column")
        t_pos = header.index(TARGET_COLUMN)
        names = tuple(h for i, h in enumerate(header) if i != t_pos)
        feats, targets = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"row {line}: expected {len(header)} cells, got {len(row)}")
            feats.append([_parse_float(c.strip(), line, header[i]) for i, c in enumerate(row) if i != t_pos])
            t = row[t_pos].strip()
            targets.append(math.nan if t == "" else _parse_float(t, line, TARGET_COLUMN))
    x = np.array(feats, dtype=np.float64).reshape(len(feats), len(names))
    return Dataset(x, np.array(targets, dtype=np.float64), names, t_pos)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else format(v, ".17g")


def write_csv(dataset: Dataset, path) -> None:
    names = list(dataset.feature_names)
    pos = dataset.target_position if dataset.target_position >= 0 else len(names)
    header = names[:pos] + [TARGET_COLUMN] + names[pos:]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xrow, t in zip(dataset.features, dataset.targets):
            cells = [_fmt(v) for v in xrow]
            cells.insert(pos, _fmt(t))
            w.writerow(cells)


# ------------------------------------------------------------- synthetic


def synth_generate(rng: SeededRng, n_samples: int, task: str = "sine-hetero", noise_scale: float = 1.0) -> Dataset:
    """Draw a heteroscedastic regression task.

    ``sine-hetero``: x ~ U[-3, 3], y = sin(2x) + x/2 + eps, sd(eps) = 0.05 + 0.2|x|.
    ``poly-hetero``: x ~ U[-2, 2]^3, y = x1^2 - x2*x3 + eps, sd(eps) = 0.1 + 0.3*x1^2.
    ``noise_scale`` multiplies the noise sd.
    """
    if n_samples < 10:
        raise ParameterError(f"n_samples must be >= 10, got {n_samples}")
    if noise_scale < 0:
        raise ParameterError("noise_scale must be >= 0")
    if task == "sine-hetero":
        x = rng.uniform((n_samples, 1), -3.0, 3.0)
        f = np.sin(2 * x[:, 0]) + 0.5 * x[:, 0]
        sd = 0.05 + 0.2 * np.abs(x[:, 0])
    elif task == "poly-hetero":
        x = rng.uniform((n_samples, 3), -2.0, 2.0)
        f = x[:, 0] ** 2 - x[:, 1] * x[:, 2]
        sd = 0.1 + 0.3 * x[:, 0] ** 2
    else:
        raise ParameterError(f"unknown task {task!r}; expected one of {TASKS}")
    eps = rng.normal(n_samples)
    return Dataset(x, f + noise_scale * sd * eps)


# ----------------------------------------------------------------- split


def _floor(v: float) -> int:
    return int(math.floor(v + 1e-9))


def split(dataset: Dataset, cfg: SplitConfig, min_labeled: int = 0) -> Splits:
    """Shuffle labeled rows into test / val / train and keep a ``label_ratio``
    share of train labeled. The remaining train rows, plus any rows that had no
    target to begin with, form the unlabeled pool.
    """
    rng = SeededRng(cfg.seed)
    lab = np.flatnonzero(dataset.labeled_mask)
    unl = np.flatnonzero(~dataset.labeled_mask)
    perm = lab[rng.permutation(lab.size)]
    n_test = _floor(cfg.test_fraction * lab.size)
    n_val = _floor(cfg.val_fraction * lab.size)
    test_rows, val_rows, train_rows = perm[:n_test], perm[n_test : n_test + n_val], perm[n_test + n_val :]
    n_lab = _floor(cfg.label_ratio * train_rows.size)
    if n_lab < max(min_labeled, 1):
        raise ConfigError(
            f"label_ratio {cfg.label_ratio} leaves {n_lab} labeled training rows, "
            f"need at least {max(min_labeled, 1)}"
        )
    lab_rows, unl_rows = train_rows[:n_lab], np.concatenate([train_rows[n_lab:], unl])
    x, y = dataset.features, dataset.targets

    def labeled(rows):
        return LabeledSet(x[rows], y[rows], rows)

    return Splits(
        labeled(lab_rows),
        UnlabeledPool(x[unl_rows], unl_rows, y[unl_rows]),
        labeled(val_rows),
        labeled(test_rows),
    )


def standardize_features(splits: Splits) -> Splits:
    """Z-score every split's features with the training rows' mean/std.

    Only features of the training pool (labeled and unlabeled) are used, so
    no target information leaks.
    """
    train_x = np.vstack([splits.train_labeled.x, splits.train_unlabeled.x])
    mu, sd = train_x.mean(axis=0), feature_scale(train_x)

    def lab(s: LabeledSet) -> LabeledSet:
        return LabeledSet((s.x - mu) / sd, s.y, s.rows)

    u = splits.train_unlabeled
    return Splits(
        lab(splits.train_labeled),
        UnlabeledPool((u.x - mu) / sd, u.rows, u._shadow),
        lab(splits.val),
        lab(splits.test),
    )


# --------------------------------------------------------------- batches


def feature_scale(x: np.ndarray) -> np.ndarray:
    s = np.std(x, axis=0)
    return np.where(s > 0, s, 1.0)


def augment_views(rng: SeededRng, x: np.ndarray, aug: AugmentConfig, scale: np.ndarray):
    """Weak view: additive noise. Strong view: stronger noise, then per-feature
    zero-masking. Random numbers are drawn even when a level is zero so the
    stream does not depend on the augmentation settings.
    """
    weak = x + rng.normal(x.shape) * (aug.weak_noise_std * scale)
    strong = x + rng.normal(x.shape) * (aug.strong_noise_std * scale)
    keep = rng.uniform(x.shape) >= aug.strong_mask_prob
    return weak, np.where(keep, strong, 0.0)


def get_tri_batch(
    rng: SeededRng,
    train_labeled: LabeledSet,
    train_unlabeled: UnlabeledPool,
    n: int,
    m: int,
    aug: AugmentConfig,
    net: RegressionNet,
    scale: np.ndarray | None = None,
) -> TriBatch:
    if len(train_labeled) < 2 * n:
        raise ConfigError(f"labeled pool has {len(train_labeled)} rows, need {2 * n} for two disjoint batches")
    if len(train_unlabeled) < m:
        raise ConfigError(f"unlabeled pool has {len(train_unlabeled)} rows, need {m}")
    pick = rng.choice(len(train_labeled), 2 * n)
    idx_l, idx_o = pick[:n], pick[n:]
    idx_u = rng.choice(len(train_unlabeled), m) if m else np.zeros(0, dtype=np.int64)
    xu = train_unlabeled.x[idx_u]
    if scale is None:
        scale = feature_scale(train_unlabeled.x)
    weak, strong = augment_views(rng, xu, aug, scale)
    pseudo = predict(net, weak) if m else np.zeros(0)
    return TriBatch(
        x_l=train_labeled.x[idx_l],
        y_l=train_labeled.y[idx_l],
        x_weak=weak,
        x_strong=strong,
        x_o=train_labeled.x[idx_o],
        y_o=train_labeled.y[idx_o],
        pseudo_labels=pseudo,
        idx_l=idx_l,
        idx_u=idx_u,
        idx_o=idx_o,
        target_mean=train_labeled.target_mean,
        target_std=train_labeled.target_std,
    )
