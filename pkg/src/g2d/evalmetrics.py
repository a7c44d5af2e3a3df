"""Evaluation quantities: accuracy, MAPE, R^2, feature alignment, modality gap,
confidence ratio."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .datagen import MultimodalDataset, Split
from .diffcore import sigmoid
from .errors import ContractError, DimensionError
from .models import Student
from .scoring import confidence_ratio, confidence_values
from .trainer import TeacherCache


def _presence(split: Split):
    return None if split.presence.all() else split.presence


def student_logits(student: Student, split: Split, mode="multi") -> np.ndarray:
    """Fused logits (``mode="multi"``) or one modality's logits with the others zeroed."""
    only = None if mode == "multi" else int(mode)
    return student.predict(split.xs, _presence(split), only).logits.data


def student_predictions(student: Student, split: Split) -> np.ndarray:
    return sigmoid(student_logits(student, split)[:, 0])


def accuracy_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ContractError("accuracy over an empty split")
    # np.argmax resolves ties to the lowest class index
    return float((np.argmax(logits, axis=1) == y).mean())


def accuracy(student: Student, split: Split, mode="multi") -> float:
    """Fraction of argmax-correct predictions; ``mode`` is "multi" or a modality index."""
    if len(split) == 0:
        raise ContractError("accuracy over an empty split")
    return accuracy_from_logits(student_logits(student, split, mode), split.y)


def mape(pred, y) -> float:
    pred, y = np.asarray(pred, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if (y == 0).any():
        raise ContractError("MAPE undefined for zero targets")
    return float(100.0 * np.mean(np.abs((pred - y) / y)))


def r_squared(pred, y) -> float:
    pred, y = np.asarray(pred, dtype=np.float64), np.asarray(y, dtype=np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ContractError("R^2 undefined for a zero-variance target")
    return 1.0 - float(((y - pred) ** 2).sum()) / ss_tot


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; a zero row on either side gives 0."""
    if a.shape != b.shape:
        raise DimensionError(f"feature shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = na * nb
    out = np.zeros(len(a))
    ok = denom > 0
    out[ok] = (a[ok] * b[ok]).sum(axis=1) / denom[ok]
    return np.clip(out, -1.0, 1.0)


def student_features(student: Student, split: Split) -> list[np.ndarray]:
    return [f.data for f in student.predict(split.xs, _presence(split)).features]


def feature_alignment(student: Student, teacher_features: np.ndarray, split: Split, m: int) -> float:
    """Mean cosine similarity between student and teacher features of modality ``m``."""
    fs = student_features(student, split)[m]
    present = split.presence[:, m]
    return float(cosine_rows(fs[present], np.asarray(teacher_features)[present]).mean())


def modality_gap_from_features(features: Sequence[np.ndarray]) -> float:
    """Mean pairwise distance between L2-normalized per-modality mean embeddings."""
    if len(features) < 2:
        raise ContractError("modality gap needs at least two modalities")
    centers = []
    for f in features:
        c = np.asarray(f, dtype=np.float64).mean(axis=0)
        norm = np.linalg.norm(c)
        if norm == 0:
            raise ContractError("modality gap undefined for all-zero embeddings")
        centers.append(c / norm)
    return float(np.mean([np.linalg.norm(a - b) for a, b in combinations(centers, 2)]))


def modality_gap(student: Student, split: Split) -> float:
    feats = student_features(student, split)
    return modality_gap_from_features([f[split.presence[:, m]] for m, f in enumerate(feats)])


def modality_confidence(student: Student, split: Split, m: int) -> float:
    """Dataset-level confidence of the student's modality-``m`` pathway."""
    present = split.presence[:, m]
    return float(confidence_values(student_logits(student, split, m)[present], split.y[present]).mean())


@dataclass
class EvalReport:
    task: str
    multi: dict = field(default_factory=dict)
    per_modality: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    modality_gap: float | None = None
    confidence_ratio: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(student: Student, ds: MultimodalDataset, split: str = "test",
             cache: TeacherCache | None = None) -> EvalReport:
    """Full report on one split; teacher-dependent fields need ``cache``."""
    s = ds.splits[split]
    names = ds.spec.names
    rep = EvalReport(ds.task)
    if ds.task == "classify":
        rep.multi["accuracy"] = accuracy(student, s, "multi")
        for m, n in enumerate(names):
            rep.per_modality[n] = accuracy(student, s, m)
    else:
        pred = student_predictions(student, s)
        rep.multi["mape"] = mape(pred, s.y)
        rep.multi["r2"] = r_squared(pred, s.y)
        for m, n in enumerate(names):
            p = sigmoid(student_logits(student, s, m)[:, 0])
            rep.per_modality[n] = {"mape": mape(p, s.y), "r2": r_squared(p, s.y)}
    try:
        rep.modality_gap = modality_gap(student, s)
    except ContractError:
        rep.modality_gap = None
    if cache is not None and split in cache.features:
        for m, n in enumerate(names):
            rep.alignment[n] = feature_alignment(student, cache.features[split][m], s, m)
        if ds.task == "regress":
            for m, n in enumerate(names):
                present = s.presence[:, m]
                p = sigmoid(cache.logits[split][m][present][:, 0])
                rep.teacher[n] = {"mape": mape(p, s.y[present]), "r2": r_squared(p, s.y[present])}
        else:
            teacher_rho = []
            for m, n in enumerate(names):
                present = s.presence[:, m]
                logits = cache.logits[split][m][present]
                teacher_rho.append(float(confidence_values(logits, s.y[present]).mean()))
                rep.teacher[n] = {"accuracy": accuracy_from_logits(logits, s.y[present]), "rho": teacher_rho[-1]}
            for m, n in enumerate(names):
                rep.confidence_ratio[n] = confidence_ratio(modality_confidence(student, s, m), teacher_rho[m])
    return rep
