"""Teacher pretraining, teacher-output caching and the student training loop."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import SPLITS, MultimodalDataset, Split
from .diffcore import Graph, NumericalError, Tensor, backward, groups_hash, sgd_step, write_npz
from .errors import ConfigError, PipelineError, TrainingError
from .losses import LossWeights, g2d_loss, student_loss
from .models import FusionStrategy, Student, Teacher, build_student
from .scoring import ModalityRanking, rank_modalities, task_confidence
from .smp import Schedule, modulation_mask, partial_mask, prioritized_set

log = logging.getLogger(__name__)

SUPPRESSION_MODES = ("complete", "partial", "none")
RANKING_FREEZE = ("never", "per_phase")


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters for one reproducible run.

    Optimizer defaults follow the reference regime (SGD, momentum 0.9, weight
    decay 1e-4, batch 16, lr decayed by 0.1 every 200 epochs, alpha = beta = 1);
    the epoch budget is scaled down to 60 with an even (30, 30) split.
    """

    alpha: float = 1.0
    beta: float = 1.0
    tau: tuple[int, ...] = (30, 30)
    fusion: str = "late"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_interval: int = 200
    batch_size: int = 16
    epochs: int = 60
    seed: int = 999
    suppression: str = "complete"
    ranking_freeze: str = "never"
    hidden: int = 64
    feature_dim: int = 32
    fused_dim: int = 32
    n_layers: int = 2
    cond_modality: int | None = None
    teacher_epochs: int | None = 100
    teacher_patience: int = 20

    def __post_init__(self):
        object.__setattr__(self, "tau", tuple(int(t) for t in self.tau))
        object.__setattr__(self, "fusion", FusionStrategy.parse(self.fusion).value)
        if self.suppression not in SUPPRESSION_MODES:
            raise ConfigError(f"suppression must be one of {SUPPRESSION_MODES}")
        if self.ranking_freeze not in RANKING_FREEZE:
            raise ConfigError(f"ranking_freeze must be one of {RANKING_FREEZE}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.batch_size <= 0 or self.epochs <= 0 or self.lr_decay_interval <= 0:
            raise ConfigError("batch_size, epochs and lr_decay_interval must be positive")
        if self.suppression == "complete":
            if sum(self.tau) != self.epochs:
                raise ConfigError(f"epochs ({self.epochs}) must equal sum(tau) = {sum(self.tau)} "
                                  f"under complete suppression")
            Schedule(self.tau)
        LossWeights(self.alpha, self.beta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.tau)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_interval)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau"] = list(self.tau)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    def with_schedule(self, tau: Sequence[int]) -> "RunConfig":
        return replace(self, tau=tuple(tau), epochs=sum(tau))


# -- teachers ------------------------------------------------------------

def _batches(rng: np.random.Generator, index: np.ndarray, batch_size: int):
    perm = index[rng.permutation(len(index))]
    for start in range(0, len(perm), batch_size):
        yield perm[start:start + batch_size]


def _teacher_score(teacher: Teacher, split: Split, task: str) -> float:
    present = split.presence[:, teacher.modality]
    if not present.any():
        return 0.0
    _, logits = teacher.predict(split.xs[teacher.modality][present])
    y = split.y[present]
    if task == "classify":
        return float((logits.argmax(1) == y).mean())
    pred = 1.0 / (1.0 + np.exp(-logits[:, 0]))
    return -float(((pred - y) ** 2).mean())


def train_teacher(ds: MultimodalDataset, m: int, cfg: RunConfig) -> Teacher:
    """Unimodal supervised training with early stopping on validation score.

    Samples where modality ``m`` is absent are skipped. Returns the best
    validation checkpoint.
    """
    if not 0 <= m < ds.k:
        raise ConfigError(f"dataset has no modality {m}")
    rng = np.random.default_rng([cfg.seed, 1, m])
    teacher = Teacher.build(rng, m, ds.spec.modalities[m].feature_dim, cfg.hidden, cfg.feature_dim,
                            ds.num_outputs, cfg.n_layers)
    order = np.random.default_rng([cfg.seed, 2, m])
    train = ds.train
    index = np.flatnonzero(train.presence[:, m])
    best_score, best_values, stale = -np.inf, teacher.group.copy_values(), 0
    for epoch in range(1, (cfg.teacher_epochs or cfg.epochs) + 1):
        lr = cfg.lr_at(epoch)
        try:
            for idx in _batches(order, index, cfg.batch_size):
                g = Graph()
                _, logits = teacher.forward(g, train.xs[m][idx])
                loss = student_loss(g, logits, train.y[idx], ds.task)
                grads = backward(loss, g, [teacher.group])
                sgd_step(teacher.group, grads[teacher.group.name], lr, cfg.momentum, cfg.weight_decay)
        except NumericalError as exc:
            raise TrainingError(f"teacher {m} diverged in epoch {epoch}: {exc}", epoch) from exc
        score = _teacher_score(teacher, ds.val, ds.task)
        if score > best_score:
            best_score, best_values, stale = score, teacher.group.copy_values(), 0
        else:
            stale += 1
            if stale >= cfg.teacher_patience:
                break
    teacher.group.load_values(best_values)
    teacher.group.velocity = [np.zeros_like(v) for v in teacher.group.velocity]
    return teacher


def train_teachers(ds: MultimodalDataset, cfg: RunConfig) -> list[Teacher]:
    return [train_teacher(ds, m, cfg) for m in range(ds.k)]


def teacher_hash(teacher: Teacher) -> str:
    return groups_hash([teacher.group])


# -- teacher cache -------------------------------------------------------

CACHE_FORMAT = "g2d-teacher-cache"
CACHE_VERSION = 1


@dataclass
class TeacherCache:
    """Per-split, per-modality teacher features and logits."""

    features: dict[str, list[np.ndarray]]
    logits: dict[str, list[np.ndarray]]
    teacher_hashes: list[str]
    dataset_hash: str = ""

    @property
    def key(self) -> str:
        return hashlib.sha256("|".join(self.teacher_hashes + [self.dataset_hash]).encode()).hexdigest()

    @property
    def k(self) -> int:
        return len(self.teacher_hashes)

    def lookup(self, split: str, index: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return ([f[index] for f in self.features[split]], [l[index] for l in self.logits[split]])

    def validate(self, ds: MultimodalDataset, splits: Sequence[str] = ("train",)) -> None:
        missing = []
        for split in splits:
            n = len(ds.splits[split])
            for m in range(ds.k):
                feats = self.features.get(split, [])
                logits = self.logits.get(split, [])
                if m >= len(feats) or m >= len(logits) or len(feats[m]) != n or len(logits[m]) != n:
                    missing.append(f"{split}/modality {m}")
        if missing:
            raise PipelineError(f"teacher cache incomplete; missing cells: {', '.join(missing)}")

    def save(self, path) -> None:
        header = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "teacher_hashes": self.teacher_hashes,
                  "dataset_hash": self.dataset_hash, "splits": sorted(self.features)}
        arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
        for split in self.features:
            for m in range(self.k):
                arrays[f"{split}_f{m}"] = self.features[split][m]
                arrays[f"{split}_l{m}"] = self.logits[split][m]
        write_npz(path, arrays)

    @classmethod
    def load(cls, path, teachers: Sequence[Teacher] | None = None,
             expected_hashes: Sequence[str] | None = None) -> "TeacherCache":
        """Load a cache, rejecting it if its teacher hashes disagree with the given teachers."""
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"teacher cache not found: {path}")
        with np.load(path) as npz:
            header = json.loads(npz["__header__"].tobytes().decode())
            if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
                raise PipelineError(f"{path}: not a {CACHE_FORMAT} v{CACHE_VERSION} file")
            k = len(header["teacher_hashes"])
            feats = {s: [npz[f"{s}_f{m}"] for m in range(k)] for s in header["splits"]}
            logits = {s: [npz[f"{s}_l{m}"] for m in range(k)] for s in header["splits"]}
        cache = cls(feats, logits, list(header["teacher_hashes"]), header["dataset_hash"])
        if teachers is not None:
            expected_hashes = [teacher_hash(t) for t in teachers]
        if expected_hashes is not None and list(expected_hashes) != cache.teacher_hashes:
            raise PipelineError(f"{path}: teacher cache was built from different teacher checkpoints (stale hash)")
        return cache


def build_teacher_cache(teachers: Sequence[Teacher], ds: MultimodalDataset,
                        splits: Sequence[str] = SPLITS) -> TeacherCache:
    feats: dict[str, list[np.ndarray]] = {}
    logits: dict[str, list[np.ndarray]] = {}
    for split in splits:
        feats[split], logits[split] = [], []
        for t in teachers:
            f, l = t.predict(ds.splits[split].xs[t.modality])
            feats[split].append(f)
            logits[split].append(l)
    return TeacherCache(feats, logits, [teacher_hash(t) for t in teachers], ds.content_hash())


def dataset_confidence(cache: TeacherCache, ds: MultimodalDataset, split: str = "train") -> list[float]:
    """Teacher confidence over a whole split, present samples only."""
    s = ds.splits[split]
    return [task_confidence(ds.task, cache.logits[split][m], s.y, m, "dataset", s.presence[:, m]).rho
            for m in range(ds.k)]


# -- student -------------------------------------------------------------

@dataclass
class TrainResult:
    student: Student
    history: list[dict]
    loss_log: list[dict] = field(default_factory=list)
    confidence_log: list[dict] = field(default_factory=list)
    mask_log: list[dict] = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def _resolve_cond(cfg: RunConfig, cache: TeacherCache | None, ds: MultimodalDataset) -> int | None:
    if not FusionStrategy.parse(cfg.fusion).needs_conditioning:
        return cfg.cond_modality
    if cfg.cond_modality is not None:
        return cfg.cond_modality
    if cache is None:
        raise ConfigError(f"{cfg.fusion} fusion needs cond_modality when no teachers are available")
    rho = dataset_confidence(cache, ds)
    return int(np.argmax(rho))


def make_student(ds: MultimodalDataset, cfg: RunConfig, cond: int | None) -> Student:
    rng = np.random.default_rng([cfg.seed, 3])
    return build_student(rng, [m.feature_dim for m in ds.spec.modalities], [cfg.feature_dim] * ds.k,
                         ds.num_outputs, cfg.fusion, cfg.hidden, cfg.fused_dim, cond, cfg.n_layers,
                         ds.spec.names)


def _epoch_eval(student: Student, ds: MultimodalDataset) -> dict:
    from .evalmetrics import accuracy, mape, r_squared, student_predictions

    row = {}
    if ds.task == "classify":
        row["val_acc_multi"] = accuracy(student, ds.val, "multi")
        for m, name in enumerate(ds.spec.names):
            row[f"val_acc_{name}"] = accuracy(student, ds.val, m)
    else:
        pred = student_predictions(student, ds.val)
        row["val_mape"] = mape(pred, ds.val.y)
        row["val_r2"] = r_squared(pred, ds.val.y)
    return row


def _train_student(ds: MultimodalDataset, cfg: RunConfig, cache: TeacherCache | None,
                   snapshot_groups: Sequence[str] = ()) -> TrainResult:
    k, names, task = ds.k, ds.spec.names, ds.task
    if cache is not None:
        if cache.k != k:
            raise PipelineError(f"teacher cache covers {cache.k} modalities, dataset has {k}")
        cache.validate(ds)
    elif cfg.suppression != "none":
        raise PipelineError(f"suppression={cfg.suppression} needs teacher scores; no teacher cache given")
    if cfg.suppression == "complete" and cfg.schedule.k != k:
        raise ConfigError(f"tau has {cfg.schedule.k} phases for {k} modalities")

    student = make_student(ds, cfg, _resolve_cond(cfg, cache, ds))
    order = np.random.default_rng([cfg.seed, 4])
    train = ds.train
    index = np.arange(len(train))
    modalities = list(range(k))
    result = TrainResult(student, [])
    frozen_ranking = None
    prev_ranking = None
    prev_phase = None
    snap_names = set(snapshot_groups)

    def snapshot(epoch, when):
        if snap_names:
            result.snapshots.append((epoch, when, {g.name: g.copy_values() for g in student.groups
                                                   if g.name in snap_names}))

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        phase = cfg.schedule.phase(epoch) if cfg.suppression == "complete" else None
        if phase != prev_phase:
            frozen_ranking = None
            prev_phase = phase
        snapshot(epoch, "start")
        loss_sum = student_sum = 0.0
        kappa_sum = np.zeros(k)
        rho_sum = np.zeros(k)
        flips = n_batches = 0
        for b, idx in enumerate(_batches(order, index, cfg.batch_size)):
            batch = train.batch(idx)
            presence = None if batch.presence.all() else batch.presence
            g = Graph()
            try:
                out = student.forward(g, batch.xs, presence)
                if cache is not None:
                    t_feats, t_logits = cache.lookup("train", idx)
                    bd = g2d_loss(g, batch.y, out.features, out.logits, t_feats, t_logits, cfg.weights,
                                  task, presence, where=f"(epoch {epoch}, batch {b})")
                    loss, student_value = bd.total_tensor, bd.student
                    result.loss_log.append({"epoch": epoch, "batch": b, "total": bd.total, "student": bd.student,
                                            **{f"feat_{n}": v for n, v in zip(names, bd.feat)},
                                            **{f"logit_{n}": v for n, v in zip(names, bd.logit)},
                                            "residual": bd.identity_residual()})
                else:
                    loss = student_loss(g, out.logits, batch.y, task)
                    student_value = loss.item()
                    result.loss_log.append({"epoch": epoch, "batch": b, "total": student_value,
                                            "student": student_value})
                grads = backward(loss, g, student.groups)
            except NumericalError as exc:
                raise TrainingError(f"student training diverged at epoch {epoch}, batch {b}: {exc}", epoch,
                                    {"epoch": epoch, "batch": b, "lr": lr,
                                     "last_losses": result.loss_log[-5:]}) from exc

            kappa = (1.0,) * k
            if cache is not None:
                scores = [task_confidence(task, t_logits[m], batch.y, m, "batch", batch.presence[:, m])
                          if batch.presence[:, m].any() else None for m in modalities]
                scores = [s for s in scores if s is not None]
                for s in scores:
                    rho_sum[s.modality] += s.rho
                # a batch missing a modality entirely keeps the previous ranking
                ranking = rank_modalities(scores) if len(scores) == k else prev_ranking
                if ranking is None:
                    ranking = ModalityRanking(tuple(modalities))
                if prev_ranking is not None and ranking != prev_ranking:
                    flips += 1
                prev_ranking = ranking
                if cfg.suppression == "complete":
                    if cfg.ranking_freeze == "per_phase":
                        frozen_ranking = frozen_ranking or ranking
                        ranking = frozen_ranking
                    kappa = modulation_mask(prioritized_set(epoch, cfg.schedule, ranking), modalities, phase).kappa
                elif cfg.suppression == "partial" and len(scores) == k:
                    kappa = partial_mask(scores).kappa

            for group in student.groups:
                kap = kappa[group.role.modality] if group.role.kind == "modality" else 1.0
                sgd_step(group, grads[group.name], lr, cfg.momentum, cfg.weight_decay, kap)
            loss_sum += loss.item()
            student_sum += student_value
            kappa_sum += kappa
            n_batches += 1
        snapshot(epoch, "end")

        row = {"epoch": epoch, "phase": "" if phase is None else phase, "lr": lr,
               "loss": loss_sum / n_batches, "loss_student": student_sum / n_batches}
        for m, name in enumerate(names):
            row[f"kappa_{name}"] = kappa_sum[m] / n_batches
        row.update(_epoch_eval(student, ds))
        result.history.append(row)
        result.mask_log.append({"epoch": epoch, "phase": row["phase"],
                                **{name: kappa_sum[m] / n_batches for m, name in enumerate(names)}})
        if cache is not None:
            for m, name in enumerate(names):
                result.confidence_log.append({"epoch": epoch, "modality": name, "rho": rho_sum[m] / n_batches,
                                              "rank_flips": flips})
        log.debug("epoch %d loss %.4f", epoch, row["loss"])
    return result


def train_student_g2d(ds: MultimodalDataset, cache: TeacherCache, cfg: RunConfig,
                      snapshot_groups: Sequence[str] = ()) -> TrainResult:
    """Distillation loss plus SMP-masked updates, one masked SGD step per mini-batch."""
    if cache is None:
        raise PipelineError("G2D training needs a teacher cache")
    return _train_student(ds, cfg, cache, snapshot_groups)


def train_student_joint(ds: MultimodalDataset, cfg: RunConfig) -> TrainResult:
    """Plain joint training: student loss only, every group updated every step."""
    return _train_student(ds, replace(cfg, alpha=0.0, beta=0.0, suppression="none"), None)


# -- CSV ------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(rows: Sequence[dict], path) -> None:
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    for r in rows[1:]:
        for c in r:
            if c not in cols:
                cols.append(c)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
