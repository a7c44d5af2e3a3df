"""Command-line driver: dataset generation, teachers, student runs and ablations.

Dataset specs and experiment plans are YAML files. Paths inside a plan are
resolved relative to the plan file. Exit codes: 0 ok, 2 bad configuration,
3 missing or stale pipeline artifact, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable

import yaml

from . import __version__
from .datagen import DatasetSpec, MultimodalDataset, apply_missing_mask, generate, save_dataset
from .diffcore import load_checkpoint, save_checkpoint
from .errors import ConfigError, G2DError, NumericalError, PipelineError
from .evalmetrics import evaluate
from .experiment import (ABLATIONS, METHODS, FileSource, MaskedSource, SpecSource, ablation_variants,
                         headline, summarize, sweep)
from .models import Teacher
from .trainer import (RunConfig, TeacherCache, build_teacher_cache, teacher_hash, train_student_g2d,
                      train_student_joint, train_teachers, write_csv)

log = logging.getLogger("g2d")

OUTPUT_ENV = "G2D_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_PIPELINE, EXIT_NUMERICAL = 2, 3, 4
_TEACHER_FIELDS = ("hidden", "feature_dim", "n_layers", "lr", "momentum", "weight_decay", "lr_decay_factor",
                   "lr_decay_interval", "batch_size", "teacher_epochs", "teacher_patience")


# -- YAML with line numbers ---------------------------------------------------

class Doc:
    """Parsed YAML plus the source line of every mapping key, for error messages."""

    def __init__(self, path: Path):
        self.path = path
        self.lines: dict[tuple, int] = {}
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigError(f"{path}: file not found") from None
        try:
            node = yaml.compose(text)
            self.data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark else 1
            raise ConfigError(f"{path}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
        if node is not None:
            self._index(node, ())

    def _index(self, node, prefix):
        self.lines.setdefault(prefix, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            seen = set()
            for k, v in node.value:
                key = k.value
                if key in seen:
                    raise ConfigError(f"{self.path}:{k.start_mark.line + 1}: duplicate key {key!r}")
                seen.add(key)
                self.lines[prefix + (key,)] = k.start_mark.line + 1
                self._index(v, prefix + (key,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._index(v, prefix + (i,))

    def error(self, where: tuple, message: str) -> ConfigError:
        while where and where not in self.lines:
            where = where[:-1]
        return ConfigError(f"{self.path}:{self.lines.get(where, 1)}: {message}")


def _mapping(doc: Doc, value, where: tuple) -> dict:
    if not isinstance(value, dict):
        raise doc.error(where, f"expected a mapping at {'/'.join(map(str, where)) or 'top level'}")
    return value


def spec_from_yaml(doc: Doc, data, where: tuple = ()) -> tuple[DatasetSpec, float]:
    """DatasetSpec and miss rate from a parsed spec mapping; errors point at the offending line."""
    d = dict(_mapping(doc, data, where))
    miss_rate = d.pop("miss_rate", 0.0)
    known = {f.name for f in fields(DatasetSpec)}
    for key in d:
        if key not in known:
            raise doc.error(where + (key,), f"unknown dataset spec key {key!r}")
    if d.get("num_classes") in ("regression", "regress"):
        d["num_classes"] = None
    mods = d.get("modalities")
    if not isinstance(mods, list):
        raise doc.error(where + ("modalities",), "modalities must be a list")
    for i, m in enumerate(mods):
        _mapping(doc, m, where + ("modalities", i))
    try:
        spec = DatasetSpec.from_dict(d)
    except (ConfigError, TypeError) as exc:
        raise doc.error(where + ("modalities",), str(exc)) from None
    try:
        spec.validate()
    except ConfigError as exc:
        msg = str(exc)
        target = where + ("modalities",)
        for i, m in enumerate(spec.modalities):
            if msg.startswith(f"modality {m.name}:"):
                bad = next((f for f in ("feature_dim", "signal_strength", "noise_scale") if f in msg), None)
                target = where + ("modalities", i) + ((bad,) if bad else ())
                break
        else:
            for key in known:
                if key != "modalities" and key in msg:
                    target = where + (key,)
                    break
        raise doc.error(target, msg) from None
    try:
        miss_rate = float(miss_rate)
        if not 0 <= miss_rate < 1:
            raise ValueError
    except (TypeError, ValueError):
        raise doc.error(where + ("miss_rate",), f"miss_rate must lie in [0, 1), got {miss_rate!r}") from None
    return spec, miss_rate


# -- experiment plans -----------------------------------------------------------

@dataclass
class RunSpec:
    name: str
    dataset: str
    method: str
    config: RunConfig
    cache: Path | None = None


@dataclass
class ExperimentPlan:
    """Named runs, each pairing a RunConfig with a dataset, plus seeds and an output root."""

    path: Path
    output: Path
    seeds: list[int]
    datasets: dict[str, Callable[[int], MultimodalDataset]]
    runs: dict[str, RunSpec]

    def run(self, name: str) -> RunSpec:
        if name not in self.runs:
            raise ConfigError(f"{self.path}: no run named {name!r}; available: {sorted(self.runs)}")
        return self.runs[name]

    def teacher_dir(self, dataset: str, seed: int) -> Path:
        return self.output / "teachers" / dataset / f"seed{seed}"


def _seeds(doc: Doc, value, where) -> list[int]:
    if isinstance(value, int):
        value = [value]
    if not isinstance(value, list) or not value or not all(isinstance(s, int) and s >= 0 for s in value):
        raise doc.error(where, "seeds must be a nonempty list of nonnegative integers")
    return list(value)


def load_plan(path, out: str | None = None) -> ExperimentPlan:
    path = Path(path).resolve()
    doc = Doc(path)
    top = _mapping(doc, doc.data, ())
    base = path.parent
    for key in top:
        if key not in ("output", "seeds", "datasets", "runs"):
            raise doc.error((key,), f"unknown plan key {key!r}")
    if out or os.environ.get(OUTPUT_ENV):
        output = Path(out or os.environ[OUTPUT_ENV])
    else:
        output = base / str(top.get("output", "runs"))
    seeds = _seeds(doc, top.get("seeds", [0]), ("seeds",))

    datasets = {}
    for name, entry in _mapping(doc, top.get("datasets"), ("datasets",)).items():
        where = ("datasets", name)
        entry = _mapping(doc, entry, where)
        extra = set(entry) - {"spec", "file", "reseed", "miss_rate"}
        if extra:
            raise doc.error(where + (sorted(extra)[0],), f"unknown dataset key {sorted(extra)[0]!r}")
        if ("spec" in entry) == ("file" in entry):
            raise doc.error(where, f"dataset {name!r} needs exactly one of 'spec' or 'file'")
        miss = 0.0
        if "file" in entry:
            source = FileSource(str(base / entry["file"]))
        else:
            spec_val = entry["spec"]
            if isinstance(spec_val, str):
                sdoc = Doc(base / spec_val)
                spec, miss = spec_from_yaml(sdoc, sdoc.data)
            else:
                spec, miss = spec_from_yaml(doc, spec_val, where + ("spec",))
            source = SpecSource(spec, bool(entry.get("reseed", True)))
        miss = float(entry.get("miss_rate", miss))
        if not 0 <= miss < 1:
            raise doc.error(where + ("miss_rate",), f"miss_rate must lie in [0, 1), got {miss}")
        datasets[name] = MaskedSource(source, miss) if miss > 0 else source

    runs = {}
    for name, entry in _mapping(doc, top.get("runs"), ("runs",)).items():
        where = ("runs", name)
        entry = _mapping(doc, entry, where)
        extra = set(entry) - {"dataset", "method", "config", "cache"}
        if extra:
            raise doc.error(where + (sorted(extra)[0],), f"unknown run key {sorted(extra)[0]!r}")
        ds_name = entry.get("dataset")
        if ds_name not in datasets:
            raise doc.error(where + ("dataset",), f"run {name!r} references unknown dataset {ds_name!r}")
        method = entry.get("method", "g2d")
        if method not in METHODS:
            raise doc.error(where + ("method",), f"method must be one of {METHODS}, got {method!r}")
        cfg_dict = dict(_mapping(doc, entry.get("config", {}) or {}, where + ("config",)))
        if "tau" in cfg_dict and "epochs" not in cfg_dict and isinstance(cfg_dict["tau"], list):
            cfg_dict["epochs"] = sum(cfg_dict["tau"])
        try:
            cfg = RunConfig.from_dict(cfg_dict)
        except (ConfigError, TypeError) as exc:
            bad = next((k for k in cfg_dict if k in str(exc)), None)
            raise doc.error(where + ("config",) + ((bad,) if bad else ()), str(exc)) from None
        cache = base / entry["cache"] if "cache" in entry else None
        runs[name] = RunSpec(name, ds_name, method, cfg, cache)
    return ExperimentPlan(path, output, seeds, datasets, runs)


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    doc = Doc(Path(args.spec))
    spec, miss = spec_from_yaml(doc, doc.data)
    ds = generate(spec)
    if miss > 0:
        ds = apply_missing_mask(ds, miss, spec.seed)
    out = Path(args.out) if args.out else Path(args.spec).with_suffix(".g2d")
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(ds, out)
    print(f"{out}\t{ds.task}\tsha256:{digest}")
    return 0


def _teacher_meta(cfg: RunConfig) -> dict:
    return {f: getattr(cfg, f) for f in _TEACHER_FIELDS}


def _train_teachers_seed(plan: ExperimentPlan, run: RunSpec, seed: int) -> str:
    cfg = replace(run.config, seed=seed)
    ds = plan.datasets[run.dataset](seed)
    teachers = train_teachers(ds, cfg)
    tdir = plan.teacher_dir(run.dataset, seed)
    tdir.mkdir(parents=True, exist_ok=True)
    meta = {"seed": seed, "dataset_hash": ds.content_hash(), "teacher_config": _teacher_meta(cfg)}
    for t in teachers:
        save_checkpoint(tdir / f"teacher_{t.modality}.npz", [t.group], meta)
    cache = build_teacher_cache(teachers, ds)
    cache.save(tdir / "cache.npz")
    info = dict(meta, teacher_hashes=cache.teacher_hashes, cache_key=cache.key, k=ds.k)
    (tdir / "teachers.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return str(tdir)


def cmd_teachers(args) -> int:
    plan = load_plan(args.plan, args.out)
    run = plan.run(args.run)
    seeds = args.seed_list or plan.seeds
    for d in _map_seeds(_train_teachers_seed, plan, run, seeds, args.threads):
        print(d)
    return 0


def _load_cache(plan: ExperimentPlan, run: RunSpec, ds: MultimodalDataset, seed: int) -> TeacherCache | None:
    tdir = plan.teacher_dir(run.dataset, seed)
    path = run.cache or tdir / "cache.npz"
    if not path.exists():
        if run.method == "joint":
            return None
        raise PipelineError(f"teacher cache not found: {path} (run `g2d teachers --plan {plan.path} "
                            f"--run {run.name}` first)")
    info_path = path.parent / "teachers.json"
    if not info_path.exists():
        raise PipelineError(f"teacher manifest not found next to the cache: {info_path}")
    info = json.loads(info_path.read_text())
    teachers = [Teacher.from_group(load_checkpoint(path.parent / f"teacher_{m}.npz").groups[0])
                for m in range(info["k"])]
    cache = TeacherCache.load(path, teachers=teachers)
    if cache.dataset_hash != ds.content_hash():
        raise PipelineError(f"{path}: teacher cache was built for a different dataset (stale dataset hash)")
    if info["teacher_config"] != _teacher_meta(run.config) and run.method == "g2d":
        raise PipelineError(f"{path}: teachers were trained with different settings than run {run.name!r}")
    return cache


def _train_seed(plan: ExperimentPlan, run: RunSpec, seed: int) -> str:
    cfg = replace(run.config, seed=seed)
    ds = plan.datasets[run.dataset](seed)
    cache = _load_cache(plan, run, ds, seed)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    res = train_student_joint(ds, cfg) if run.method == "joint" else train_student_g2d(ds, cache, cfg)
    report = evaluate(res.student, ds, "test", cache)
    rdir = plan.output / run.name / f"seed{seed}"
    rdir.mkdir(parents=True, exist_ok=True)
    write_csv(res.history, rdir / "metrics.csv")
    write_csv(res.loss_log, rdir / "losses.csv")
    write_csv(res.confidence_log, rdir / "confidence.csv")
    save_checkpoint(rdir / "student.npz", res.student.groups, {"run": run.name, "seed": seed})
    (rdir / "report.json").write_text(report.to_json() + "\n")
    manifest = {
        "run": run.name, "method": run.method, "seed": seed, "version": __version__,
        "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": cfg.to_dict(), "dataset": run.dataset, "dataset_spec": ds.spec.to_dict(),
        "dataset_hash": ds.content_hash(), "miss_rate": ds.miss_rate,
        "teacher_cache_key": cache.key if cache else None,
        "teacher_hashes": cache.teacher_hashes if cache else None,
        "schedule": list(cfg.tau) if cfg.suppression == "complete" else None,
        "masks": res.mask_log,
        "files": ["metrics.csv", "losses.csv", "confidence.csv", "student.npz", "report.json"],
    }
    (rdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    summary = " ".join(f"{k}={v:.4f}" for k, v in headline(report).items() if k.startswith("multi"))
    return f"{rdir}\t{summary}"


def _map_seeds(fn, plan, run, seeds, threads):
    if threads <= 1 or len(seeds) == 1:
        return [fn(plan, run, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, [plan] * len(seeds), [run] * len(seeds), seeds))


def cmd_train(args) -> int:
    plan = load_plan(args.plan, args.out)
    run = plan.run(args.run)
    for line in _map_seeds(_train_seed, plan, run, args.seed_list or plan.seeds, args.threads):
        print(line)
    return 0


def cmd_ablate(args) -> int:
    plan = load_plan(args.plan, args.out)
    run = plan.run(args.run)
    seeds = args.seed_list or plan.seeds
    variants = ablation_variants(args.ablation, run.config)
    outcomes = sweep(plan.datasets[run.dataset], run.config, variants, seeds, args.threads)
    rows = summarize(outcomes)
    adir = plan.output / "ablations"
    adir.mkdir(parents=True, exist_ok=True)
    out = adir / f"{run.name}_{args.ablation}.csv"
    write_csv(rows, out)
    write_csv([{"variant": o.label, "method": o.method, "seed": o.seed, **headline(o.report)} for o in outcomes],
              adir / f"{run.name}_{args.ablation}_seeds.csv")
    key = "multi_acc" if "multi_acc_mean" in rows[0] else "multi_r2"
    for r in rows:
        print(f"{r['variant']:<24} {key}={r[key + '_mean']:.4f} +- {r[key + '_std']:.4f}")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="g2d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset from a YAML spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", help="dataset file (default: spec path with .g2d suffix)")
    g.set_defaults(fn=cmd_gen_data)

    def plan_args(sp):
        sp.add_argument("--plan", required=True)
        sp.add_argument("--run", required=True)
        sp.add_argument("--seed-list", type=_seed_list, help="comma-separated seeds overriding the plan")
        sp.add_argument("--out", help=f"output root (overrides ${OUTPUT_ENV} and the plan)")
        sp.add_argument("--threads", type=int, default=1, help="worker processes, one seed each")

    t = sub.add_parser("teachers", help="train unimodal teachers and cache their outputs")
    plan_args(t)
    t.set_defaults(fn=cmd_teachers)
    r = sub.add_parser("train", help="train one student run")
    plan_args(r)
    r.set_defaults(fn=cmd_train)
    a = sub.add_parser("ablate", help="seed-averaged ablation around one run")
    plan_args(a)
    a.add_argument("--ablation", required=True, choices=ABLATIONS)
    a.set_defaults(fn=cmd_ablate)
    return p


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")
    return seeds


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except G2DError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
