"""Seed sweeps and ablations shared by the CLI and the acceptance suite.

A sweep trains the unimodal teachers once per (dataset, seed, teacher
settings), then every requested student variant against the same cache.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .datagen import DatasetSpec, ModalitySpec, MultimodalDataset, apply_missing_mask, generate, load_dataset
from .errors import ConfigError
from .evalmetrics import EvalReport, evaluate
from .trainer import (RunConfig, TeacherCache, TrainResult, build_teacher_cache, train_student_g2d,
                      train_student_joint, train_teachers)

log = logging.getLogger(__name__)

METHODS = ("g2d", "joint")
ABLATIONS = ("smp", "alpha_beta", "fusion", "tau", "suppression", "missing")
MISS_RATES = (0.0, 0.2, 0.4, 0.6)

# teacher training only depends on these fields
_TEACHER_FIELDS = ("seed", "hidden", "feature_dim", "n_layers", "lr", "momentum", "weight_decay",
                   "lr_decay_factor", "lr_decay_interval", "batch_size", "teacher_epochs", "teacher_patience")


def benchmark_spec(seed: int = 0, n_train: int = 600) -> DatasetSpec:
    """Two-modality classification benchmark with strengths 0.9 (``a``) and 0.4 (``v``).

    ``a`` is high-dimensional and noisy yet separable on its own; ``v`` is
    low-dimensional with a weaker class signal, so joint training leans on ``a``.
    """
    return DatasetSpec(
        modalities=(ModalitySpec("a", 48, 0.9, 2.2), ModalitySpec("v", 8, 0.4, 0.7)),
        num_classes=8, n_train=n_train, n_val=300, n_test=1000, seed=seed,
    )


def regression_benchmark_spec(seed: int = 0, n_train: int = 600) -> DatasetSpec:
    """Two-modality regression benchmark: a wide, noisy view ``a`` and a narrow, clean view ``v``.

    Joint training overfits the wide view and ends below the ``v`` teacher.
    """
    return DatasetSpec(
        modalities=(ModalitySpec("a", 64, 0.9, 2.5), ModalitySpec("v", 4, 0.4, 0.25)),
        num_classes=None, n_train=n_train, n_val=300, n_test=1000, seed=seed,
        latent_dim=4, latent_scale=1.0, target_noise=0.1,
    )


def benchmark_config(task: str = "classify", **overrides) -> RunConfig:
    """Default run settings for the benchmarks; regression gets twice the epochs
    because squared error on a sigmoid output trains far slower than cross-entropy."""
    if task == "regress":
        overrides = {"tau": (60, 60), "epochs": 120, **overrides}
    return RunConfig(**overrides)


@dataclass(frozen=True)
class SpecSource:
    """Dataset per seed from a spec; with ``reseed`` the spec's own seed is replaced by the run seed."""

    spec: DatasetSpec
    reseed: bool = True

    def __call__(self, seed: int) -> MultimodalDataset:
        return generate(replace(self.spec, seed=seed) if self.reseed else self.spec)


@dataclass(frozen=True)
class FileSource:
    """The same saved dataset for every seed."""

    path: str

    def __call__(self, seed: int) -> MultimodalDataset:
        return load_dataset(self.path)


@dataclass(frozen=True)
class MaskedSource:
    """Wraps another source and drops modality cells at ``miss_rate``."""

    inner: Callable[[int], MultimodalDataset]
    miss_rate: float

    def __call__(self, seed: int) -> MultimodalDataset:
        return apply_missing_mask(self.inner(seed), self.miss_rate, seed)


@dataclass(frozen=True)
class Variant:
    """One row of an ablation: a method, config overrides and an optional miss rate."""

    label: str
    method: str = "g2d"
    overrides: dict = field(default_factory=dict)
    miss_rate: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")

    def config(self, base: RunConfig) -> RunConfig:
        over = dict(self.overrides)
        if "tau" in over and "epochs" not in over:
            over["epochs"] = sum(over["tau"])
        return replace(base, **over)


@dataclass
class Outcome:
    label: str
    method: str
    seed: int
    report: EvalReport
    result: TrainResult | None = None


def ablation_variants(name: str, base: RunConfig, k: int = 2) -> list[Variant]:
    """Rows of the named ablation, each relative to ``base``."""
    if name == "smp":
        return [Variant("joint", "joint"),
                Variant("g2d_loss_only", overrides={"suppression": "none"}),
                Variant("smp_only", overrides={"alpha": 0.0, "beta": 0.0}),
                Variant("g2d")]
    if name == "alpha_beta":
        return [Variant(f"alpha={a:g},beta={b:g}", overrides={"alpha": a, "beta": b})
                for a, b in ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))]
    if name == "fusion":
        out = []
        for f in ("sum", "concat", "film", "bigated", "late"):
            out += [Variant(f"{f}/joint", "joint", {"fusion": f}), Variant(f"{f}/g2d", overrides={"fusion": f})]
        return out
    if name == "tau":
        total = sum(base.tau)
        rest = tuple(base.tau[1:])
        firsts = sorted({0, total // 4, total // 2})
        return [Variant(f"tau={','.join(map(str, (t,) + rest))}", overrides={"tau": (t,) + rest})
                for t in firsts]
    if name == "suppression":
        return [Variant(s, overrides={"suppression": s}) for s in ("none", "partial", "complete")]
    if name == "missing":
        out = []
        for q in MISS_RATES:
            out += [Variant(f"miss={q:g}/joint", "joint", miss_rate=q), Variant(f"miss={q:g}/g2d", miss_rate=q)]
        return out
    raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")


class TeacherStore:
    """Memoizes teachers and their cache per dataset and teacher-relevant settings."""

    def __init__(self):
        self._store: dict[tuple, tuple[list, TeacherCache]] = {}

    def get(self, ds: MultimodalDataset, cfg: RunConfig) -> tuple[list, TeacherCache]:
        key = (ds.content_hash(),) + tuple(getattr(cfg, f) for f in _TEACHER_FIELDS)
        if key not in self._store:
            teachers = train_teachers(ds, cfg)
            self._store[key] = (teachers, build_teacher_cache(teachers, ds))
        return self._store[key]


def run_one(ds: MultimodalDataset, cfg: RunConfig, method: str, cache: TeacherCache | None) -> TrainResult:
    if method == "joint":
        return train_student_joint(ds, cfg)
    return train_student_g2d(ds, cache, cfg)


def run_seed(data_fn: Callable[[int], MultimodalDataset], base: RunConfig, variants: Sequence[Variant],
             seed: int, keep_results: bool = False) -> list[Outcome]:
    """All variants for one seed; the dataset and teachers are shared across variants."""
    store = TeacherStore()
    clean = data_fn(seed)
    datasets = {0.0: clean}
    out = []
    for v in variants:
        if v.miss_rate not in datasets:
            datasets[v.miss_rate] = apply_missing_mask(clean, v.miss_rate, seed)
        ds = datasets[v.miss_rate]
        cfg = replace(v.config(base), seed=seed)
        _, cache = store.get(ds, cfg)
        res = run_one(ds, cfg, v.method, cache)
        rep = evaluate(res.student, ds, "test", cache)
        log.info("seed %d %s: %s", seed, v.label, rep.multi)
        out.append(Outcome(v.label, v.method, seed, rep, res if keep_results else None))
    return out


def sweep(data_fn: Callable[[int], MultimodalDataset], base: RunConfig, variants: Sequence[Variant],
          seeds: Sequence[int], threads: int = 1, keep_results: bool = False) -> list[Outcome]:
    """Run every variant on every seed, optionally one process per seed.

    ``data_fn`` must be picklable when ``threads > 1``.
    """
    if threads <= 1 or len(seeds) == 1:
        return [o for s in seeds for o in run_seed(data_fn, base, variants, s, keep_results)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_seed, data_fn, base, variants, s, keep_results) for s in seeds]
        return [o for f in futures for o in f.result()]


def headline(report: EvalReport) -> dict[str, float]:
    """Flat scalar metrics of a report: multimodal and per-modality."""
    row = {}
    if report.task == "classify":
        row["multi_acc"] = report.multi["accuracy"]
        for n, acc in report.per_modality.items():
            row[f"{n}_acc"] = acc
    else:
        row["multi_mape"] = report.multi["mape"]
        row["multi_r2"] = report.multi["r2"]
        for n, d in report.per_modality.items():
            row[f"{n}_mape"] = d["mape"]
            row[f"{n}_r2"] = d["r2"]
    for n, v in report.alignment.items():
        row[f"{n}_align"] = v
    for n, d in report.teacher.items():
        for key, v in d.items():
            row[f"{n}_teacher_{key}"] = v
    for n, v in report.confidence_ratio.items():
        row[f"{n}_conf_ratio"] = v
    return row


def summarize(outcomes: Sequence[Outcome]) -> list[dict]:
    """One row per variant with seed mean and (population) standard deviation of every metric."""
    labels = list(dict.fromkeys(o.label for o in outcomes))
    rows = []
    for label in labels:
        group = [o for o in outcomes if o.label == label]
        metrics = [headline(o.report) for o in group]
        row = {"variant": label, "method": group[0].method, "n_seeds": len(group)}
        for key in metrics[0]:
            vals = np.array([m[key] for m in metrics])
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_std"] = float(vals.std())
        rows.append(row)
    return rows
