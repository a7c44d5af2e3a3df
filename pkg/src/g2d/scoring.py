"""Teacher confidence scores, modality ranking and the confidence ratio."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import sigmoid, softmax
from .errors import ContractError, DataError

SCOPES = ("batch", "running-epoch", "dataset")


@dataclass(frozen=True)
class ConfidenceScore:
    modality: int
    rho: float
    scope: str = "batch"

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"confidence must lie in [0, 1], got {self.rho}")
        if self.scope not in SCOPES:
            raise ContractError(f"unknown scope {self.scope!r}")


@dataclass(frozen=True)
class ModalityRanking:
    """Modalities ordered from least to most confident."""

    order: tuple[int, ...]

    def __getitem__(self, j: int) -> int:
        return self.order[j]

    def __len__(self):
        return len(self.order)

    @property
    def weakest(self) -> int:
        return self.order[0]

    @property
    def strongest(self) -> int:
        return self.order[-1]


def confidence_values(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample probability the model assigns to the true class."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    if y.dtype.kind not in "iu" or (y < 0).any() or (y >= logits.shape[1]).any():
        raise DataError("confidence needs integer class labels within range")
    return softmax(logits)[np.arange(len(y)), y]


def confidence(logits: np.ndarray, y: np.ndarray, modality: int = 0, scope: str = "batch",
               mask: np.ndarray | None = None) -> ConfidenceScore:
    """Mean softmax probability of the ground-truth label over the (masked) batch."""
    values = confidence_values(logits, y)
    if mask is not None:
        values = values[np.asarray(mask, dtype=bool)]
    if values.size == 0:
        raise ContractError("confidence over an empty batch")
    return ConfidenceScore(modality, float(np.clip(values.mean(), 0.0, 1.0)), scope)


def regression_confidence(logits: np.ndarray, y: np.ndarray, modality: int = 0, scope: str = "batch",
                          mask: np.ndarray | None = None) -> ConfidenceScore:
    """``1 - mean |sigmoid(logit) - y|`` clamped to [0, 1]."""
    err = np.abs(sigmoid(np.asarray(logits)[:, 0]) - np.asarray(y, dtype=np.float64))
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    if err.size == 0:
        raise ContractError("confidence over an empty batch")
    return ConfidenceScore(modality, float(np.clip(1.0 - err.mean(), 0.0, 1.0)), scope)


def task_confidence(task: str, logits, y, modality=0, scope="batch", mask=None) -> ConfidenceScore:
    fn = confidence if task == "classify" else regression_confidence
    return fn(logits, y, modality, scope, mask)


def rank_modalities(scores: Sequence[ConfidenceScore]) -> ModalityRanking:
    """Ascending by confidence; ties go to the lower modality index first."""
    ids = [s.modality for s in scores]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate modality ids in scores: {ids}")
    return ModalityRanking(tuple(s.modality for s in sorted(scores, key=lambda s: (s.rho, s.modality))))


def confidence_ratio(student_rho_weak: float, teacher_rho_weak: float) -> float:
    if teacher_rho_weak <= 0:
        raise ContractError("teacher confidence must be positive")
    return student_rho_weak / teacher_rho_weak
