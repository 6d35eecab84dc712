"""Batch experiment runner.

    bssr run MANIFEST [--jobs N]
    bssr gradcheck [--seeds 0..19] [--tolerance 1e-6] ...
    bssr synth --task sine-hetero --n 2000 --seed 0 --out data.csv

Manifest (YAML, relative paths resolve against the manifest's directory)::

    version: 1
    output_dir: out
    dataset:
      synth: {task: sine-hetero, n: 2000, seed: 12345}   # or: csv: data.csv
    methods: [fixed_sigma, joint_ul, bilevel]
    seeds: [0, 1, 2, 3, 4, 5]
    config:                      # any RunConfig field except method/seed
      T: 2000
      corruption: {fraction: 0.3, magnitude: 3.0, mode: offset}

Unknown keys anywhere are errors. Exit codes: 0 success, 1 gradcheck
failure, 2 bad manifest or arguments, 3 at least one run failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .data import AugmentConfig, Dataset, SplitConfig, load_csv, split, synth_generate, write_csv
from .diagnostics import CorruptionSpec, InstanceSpec, oracle_checks
from .errors import BssrError
from .numerics import SeededRng
from .pipeline import METHODS, RunConfig, RunLog, checkpoint_save, train

log = logging.getLogger("bssr")

MANIFEST_VERSION = 1
RUNLOG_COLUMNS = (
    "iteration", "l_sup", "l_unsup_fit", "l_unsup_reg", "val_mae", "val_mse",
    "val_r2", "alignment", "mean_z", "spearman",
)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_BAD_INPUT, EXIT_RUN_FAILED = 0, 1, 2, 3


# ---------------------------------------------------------------- manifest


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSource(_Strict):
    task: str = "sine-hetero"
    n: int = 2000
    seed: int = 0
    noise_scale: float = 1.0


class DatasetSource(_Strict):
    csv: Optional[str] = None
    synth: Optional[SynthSource] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.csv is None) == (self.synth is None):
            raise ValueError("give exactly one of 'csv' or 'synth'")
        return self


class AugBlock(_Strict):
    weak_noise_std: float = 0.05
    strong_noise_std: float = 0.15
    strong_mask_prob: float = 0.1


class CorruptionBlock(_Strict):
    fraction: float
    magnitude: float = 3.0
    mode: str = "offset"


class ConfigBlock(_Strict):
    gamma: Optional[float] = None
    lam: Optional[float] = None
    alpha: Optional[float] = None
    alpha_extractor: Optional[float] = None
    beta: Optional[float] = None
    T: Optional[int] = None
    n: Optional[int] = None
    m: Optional[int] = None
    hidden_dims: Optional[list[int]] = None
    feature_dim: Optional[int] = None
    ul_hidden: Optional[int] = None
    z_max: Optional[float] = None
    aug: Optional[AugBlock] = None
    corruption: Optional[CorruptionBlock] = None
    eval_every: Optional[int] = None
    lambda_warmup: Optional[bool] = None
    loss_reduction: Optional[str] = None
    test_fraction: Optional[float] = None
    val_fraction: Optional[float] = None
    standardize: Optional[bool] = None


class Manifest(_Strict):
    version: int
    output_dir: str
    dataset: DatasetSource
    methods: list[str] = []
    seeds: list[int] = [0]
    config: ConfigBlock = ConfigBlock()

    @model_validator(mode="after")
    def _check_version(self):
        if self.version != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {self.version}, expected {MANIFEST_VERSION}")
        return self


class ManifestError(BssrError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field {field}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line, self.field = line, field


def _node_line(root, loc) -> int | None:
    """1-based line of the YAML node at ``loc`` (or its deepest existing parent)."""
    node, line = root, None
    if node is not None:
        line = node.start_mark.line + 1
    for part in loc:
        nxt = None
        if isinstance(node, yaml.MappingNode):
            for key, val in node.value:
                if key.value == part:
                    nxt = val
                    line = key.start_mark.line + 1
                    break
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            nxt = node.value[part]
            line = nxt.start_mark.line + 1
        if nxt is None:
            break
        node = nxt
    return line


def parse_manifest(text: str) -> Manifest:
    try:
        raw = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ManifestError(str(getattr(exc, "problem", exc)), mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ManifestError("manifest must be a mapping", 1)
    try:
        return Manifest.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(p for p in err["loc"] if p != "__root__")
        raise ManifestError(err["msg"], _node_line(root, loc), ".".join(str(p) for p in loc) or None) from None


def build_configs(manifest: Manifest) -> list[RunConfig]:
    overrides = manifest.config.model_dump(exclude_none=True)
    try:
        if "aug" in overrides:
            overrides["aug"] = AugmentConfig(**overrides["aug"])
        if "corruption" in overrides:
            overrides["corruption"] = CorruptionSpec(**overrides["corruption"])
    except BssrError as exc:
        raise ManifestError(str(exc), field="config") from None
    if "hidden_dims" in overrides:
        overrides["hidden_dims"] = tuple(overrides["hidden_dims"])
    configs = []
    for method in manifest.methods:
        if method not in METHODS:
            raise ManifestError(f"unknown method {method!r}", field="methods")
        for seed in manifest.seeds:
            try:
                configs.append(RunConfig(method=method, seed=seed, **overrides))
            except BssrError as exc:
                raise ManifestError(str(exc), field="config") from None
    return configs


def load_dataset(source: DatasetSource, base: Path) -> Dataset:
    if source.csv is not None:
        return load_csv(base / source.csv)
    s = source.synth
    return synth_generate(SeededRng(s.seed), s.n, s.task, s.noise_scale)


# ------------------------------------------------------------------- runs


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.method}_seed{cfg.seed}_{cfg.hash()[:10]}"


def _fmt(v) -> str:
    return repr(int(v)) if isinstance(v, (int, np.integer)) else format(float(v), ".17g")


def write_runlog(runlog: RunLog, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(RUNLOG_COLUMNS) + "\n")
        for rec in runlog.records:
            fh.write(",".join(_fmt(getattr(rec, c)) for c in RUNLOG_COLUMNS) + "\n")


def _finite_or_none(d: dict | None):
    if d is None:
        return None
    return {k: (v if not isinstance(v, float) or math.isfinite(v) else None) for k, v in d.items()}


def execute_run(cfg: RunConfig, dataset: Dataset, out_dir: Path) -> dict:
    """Train one configuration and write its artifacts. Never raises on
    training trouble; failures are reported in the returned record.
    """
    rid = run_id(cfg)
    run_dir = out_dir / "runs" / rid
    run_dir.mkdir(parents=True, exist_ok=True)
    entry = {"id": rid, "method": cfg.method, "seed": cfg.seed, "config_hash": cfg.hash(), "config": cfg.to_dict()}
    try:
        splits = split(dataset, SplitConfig(cfg.gamma, cfg.seed, cfg.test_fraction, cfg.val_fraction), 2 * cfg.n)
        net, runlog = train(cfg, splits)
    except BssrError as exc:
        entry.update(status="failed", error=str(exc))
        return entry
    write_runlog(runlog, run_dir / "runlog.csv")
    if runlog.diverged:
        entry.update(status="failed", error=runlog.error)
        return entry
    checkpoint_save(net, runlog.learner, run_dir / "model.ckpt", cfg.hash())
    entry.update(
        status="ok",
        error="",
        final_val=_finite_or_none(vars(runlog.final_val)),
        final_test=_finite_or_none(vars(runlog.final_test)),
        uncertainty=_finite_or_none(runlog.uncertainty),
        wall_clock=runlog.wall_clock,
    )
    return entry


def _execute_job(job):
    return execute_run(*job)


def mean_std(values) -> str:
    a = np.asarray(values, dtype=np.float64)
    return f"{a.mean():.4f} ± {a.std():.4f}"


def summarize(entries: list[dict]) -> dict:
    methods = {}
    for method in dict.fromkeys(e["method"] for e in entries):
        group = [e for e in entries if e["method"] == method]
        ok = [e for e in group if e["status"] == "ok"]
        block = {"runs": len(group), "failed": len(group) - len(ok)}
        for key in ("mae", "mse", "r2"):
            vals = [e["final_test"][key] for e in ok if e["final_test"][key] is not None]
            block[f"test_{key}"] = mean_std(vals) if vals else None
        methods[method] = block
    return methods


def run_manifest(path, jobs: int = 1) -> int:
    path = Path(path)
    try:
        manifest = parse_manifest(path.read_text(encoding="utf-8"))
        configs = build_configs(manifest)
        if not configs:
            raise ManifestError("no runs")
        ids = [run_id(c) for c in configs]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate run ids", field="seeds")
        dataset = load_dataset(manifest.dataset, path.parent)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except BssrError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT

    out_dir = path.parent / manifest.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs_list = [(cfg, dataset, out_dir) for cfg in configs]
    t0 = time.perf_counter()
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_execute_job, jobs_list))
    else:
        entries = [_execute_job(j) for j in jobs_list]

    summary = {
        "version": MANIFEST_VERSION,
        "manifest": str(path),
        "dataset": manifest.dataset.model_dump(exclude_none=True),
        "methods": summarize(entries),
        "runs": entries,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, allow_nan=False)
        fh.write("\n")

    failed = [e for e in entries if e["status"] != "ok"]
    for e in entries:
        print(f"{e['id']:<40} {e['status']}" + (f"  {e['error']}" if e["error"] else ""))
    print(f"{len(entries)} runs, {len(failed)} failed, {time.perf_counter() - t0:.1f}s -> {out_dir / 'summary.json'}")
    return EXIT_RUN_FAILED if failed else EXIT_OK


# -------------------------------------------------------------- gradcheck


def parse_seeds(text: str) -> list[int]:
    """``"0..19"`` (inclusive) or ``"1,4,7"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def gradcheck(seeds, spec: InstanceSpec, alpha: float, tolerance: float, cosine_min: float,
              slope_lo: float, slope_hi: float, out=None) -> int:
    out = out or sys.stdout
    header = f"{'seed':>4} {'inner_theta':>11} {'outer_theta':>11} {'head_only':>10} {'full_cos':>9} {'lin_slope':>9}"
    print(header, file=out)
    failures = []  # (score, seed, check, value, limit)
    for seed in seeds:
        r = oracle_checks(seed, spec, alpha=alpha)
        print(f"{seed:>4} {r.inner_theta_err:>11.2e} {r.outer_theta_err:>11.2e} {r.head_only_err:>10.2e} "
              f"{r.full_cosine:>9.4f} {r.linearization_slope:>9.3f}", file=out)
        for name, err in (("inner_theta", r.inner_theta_err), ("outer_theta", r.outer_theta_err),
                          ("head_only", r.head_only_err)):
            if not err <= tolerance:
                failures.append((err / tolerance, seed, name, err, f"<= {tolerance:g}"))
        if not r.full_cosine >= cosine_min:
            failures.append((1 + (cosine_min - r.full_cosine) / max(1 - cosine_min, 1e-12), seed, "full_cos",
                             r.full_cosine, f">= {cosine_min:g}"))
        if not slope_lo <= r.linearization_slope <= slope_hi:
            half = max((slope_hi - slope_lo) / 2, 1e-12)
            dist = max(slope_lo - r.linearization_slope, r.linearization_slope - slope_hi)
            failures.append((1 + dist / half, seed, "lin_slope", r.linearization_slope, f"in [{slope_lo:g}, {slope_hi:g}]"))
    n_checks = 5 * len(seeds)
    if not failures:
        print(f"all {n_checks} checks passed", file=out)
        return EXIT_OK
    failures.sort(key=lambda f: -f[0])
    print(f"{len(failures)} of {n_checks} checks failed:", file=out)
    for _, seed, name, value, limit in failures:
        print(f"  seed {seed} {name} = {value:.4g} (want {limit})", file=out)
    _, seed, name, value, limit = failures[0]
    print(f"worst offender: seed {seed} {name} = {value:.4g} (want {limit})", file=out)
    return EXIT_CHECK_FAILED


# ------------------------------------------------------------------ main


def _default_jobs() -> int:
    raw = os.environ.get("BSSR_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bssr", description="Bi-level semi-supervised regression experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute every run in a manifest")
    r.add_argument("manifest")
    r.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel runs (default: $BSSR_JOBS or 1)")

    g = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    g.add_argument("--seeds", default="0..19", help="'a..b' inclusive or comma list")
    g.add_argument("--n", type=int, default=4, help="labeled batch size")
    g.add_argument("--m", type=int, default=4, help="unlabeled batch size")
    g.add_argument("--hidden", type=int, default=8)
    g.add_argument("--feature-dim", type=int, default=8)
    g.add_argument("--ul-hidden", type=int, default=8)
    g.add_argument("--alpha", type=float, default=1e-3)
    g.add_argument("--tolerance", type=float, default=1e-6, help="max rel. error for exact gradients")
    g.add_argument("--cosine-min", type=float, default=0.99, help="min cosine, head-only vs full unroll")
    g.add_argument("--slope-range", type=float, nargs=2, default=(0.8, 1.2), metavar=("LO", "HI"))

    s = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    s.add_argument("--task", default="sine-hetero", choices=("sine-hetero", "poly-hetero"))
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-scale", type=float, default=1.0)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")

    if args.command == "run":
        return run_manifest(args.manifest, max(1, args.jobs))

    if args.command == "gradcheck":
        try:
            seeds = parse_seeds(args.seeds)
            spec = InstanceSpec(args.n, args.m, args.hidden, args.feature_dim, args.ul_hidden)
        except (ValueError, BssrError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_BAD_INPUT
        lo, hi = args.slope_range
        return gradcheck(seeds, spec, args.alpha, args.tolerance, args.cosine_min, lo, hi)

    try:
        ds = synth_generate(SeededRng(args.seed), args.n, args.task, args.noise_scale)
        write_csv(ds, args.out)
    except (BssrError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    print(f"wrote {args.n} rows to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
