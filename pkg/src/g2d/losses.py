"""Student, feature-distillation and logit-distillation losses and their weighted sum.

All reductions are batch means. Distillation terms skip (sample, modality)
cells whose modality is absent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffcore import Graph, Tensor, log_softmax, sigmoid
from .errors import ConfigError, DataError, DimensionError, PipelineError

TASKS = ("classify", "regress")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class LossBreakdown:
    student: float
    feat: list[float]
    logit: list[float]
    total: float
    weights: LossWeights = field(default_factory=LossWeights)
    total_tensor: Tensor | None = field(default=None, repr=False)

    def identity_residual(self) -> float:
        """|total - (student + alpha*sum(feat) + beta*sum(logit))|."""
        w = self.weights
        return abs(self.total - (self.student + w.alpha * sum(self.feat) + w.beta * sum(self.logit)))


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")


def _masked_mean(g: Graph, per_sample: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None or mask.all():
        return g.mean(per_sample)
    count = int(mask.sum())
    if count == 0:
        return g.scale(g.sum(per_sample), 0.0)
    return g.scale(g.sum(g.mul(per_sample, mask.astype(np.float64))), 1.0 / count)


def student_loss(g: Graph, logits: Tensor, y: np.ndarray, task: str = "classify") -> Tensor:
    """Batch-mean cross-entropy, or MSE between sigmoid(logits) and real targets."""
    _check_task(task)
    if task == "classify":
        y = np.asarray(y)
        c = logits.shape[1]
        if y.dtype.kind not in "iu" or (y < 0).any() or (y >= c).any():
            raise DataError(f"class labels must be integers in [0, {c})")
        return g.scale(g.mean(g.pick(g.log_softmax(logits), y)), -1.0)
    pred = g.sigmoid(g.column(logits, 0))
    return g.mean(g.square(g.sub(pred, np.asarray(y, dtype=np.float64))))


def feat_loss(g: Graph, f_s: Tensor, f_t, present: np.ndarray | None = None) -> Tensor:
    """Batch-mean squared Euclidean distance between student and teacher features."""
    ft = f_t.data if isinstance(f_t, Tensor) else np.asarray(f_t, dtype=np.float64)
    if f_s.shape != ft.shape:
        raise DimensionError(f"feature shapes differ: student {f_s.shape} vs teacher {ft.shape}")
    per_sample = g.sum(g.square(g.sub(f_s, ft)), axis=1)
    return _masked_mean(g, per_sample, present)


def logit_loss(g: Graph, l_t, l_s: Tensor, task: str = "classify", present: np.ndarray | None = None) -> Tensor:
    """Batch-mean KL(softmax(l_t) || softmax(l_s)) at temperature 1.

    The teacher distribution is the first argument. For regression the
    divergence is replaced by the squared difference of the sigmoid outputs.
    """
    _check_task(task)
    lt = l_t.data if isinstance(l_t, Tensor) else np.asarray(l_t, dtype=np.float64)
    if lt.shape != l_s.shape:
        raise DimensionError(f"logit shapes differ: teacher {lt.shape} vs student {l_s.shape}")
    if task == "regress":
        per_sample = g.square(g.sub(g.sigmoid(g.column(l_s, 0)), sigmoid(lt[:, 0])))
        return _masked_mean(g, per_sample, present)
    log_pt = log_softmax(lt)
    pt = np.exp(log_pt)
    neg_entropy = (pt * log_pt).sum(axis=1)
    cross = g.sum(g.mul(g.log_softmax(l_s), pt), axis=1)
    per_sample = g.sub(neg_entropy, cross)
    return _masked_mean(g, per_sample, present)


def kl_divergence(l_t: np.ndarray, l_s: np.ndarray) -> np.ndarray:
    """Per-sample KL(softmax(l_t) || softmax(l_s)) without a graph."""
    lp, lq = log_softmax(l_t), log_softmax(l_s)
    # cancellation can leave about -1e-24 for near-equal inputs; the true value is never negative
    return np.maximum((np.exp(lp) * (lp - lq)).sum(axis=-1), 0.0)


def g2d_loss(g: Graph, y: np.ndarray, student_features: Sequence[Tensor], student_logits: Tensor,
             teacher_features: Sequence, teacher_logits: Sequence, weights: LossWeights,
             task: str = "classify", presence: np.ndarray | None = None, where: str = "") -> LossBreakdown:
    """Student loss plus alpha-weighted feature and beta-weighted logit distillation.

    Teacher outputs enter as constants, so no gradient can reach the teachers.
    """
    k = len(student_features)
    if len(teacher_features) != k or len(teacher_logits) != k:
        raise PipelineError(f"teacher outputs for {len(teacher_features)} modalities, student has {k} {where}".strip())
    ls = student_loss(g, student_logits, y, task)
    feats, logits = [], []
    for m in range(k):
        present = None if presence is None else presence[:, m]
        if teacher_features[m] is None or teacher_logits[m] is None:
            raise PipelineError(f"missing teacher output for modality {m} {where}".strip())
        feats.append(feat_loss(g, student_features[m], teacher_features[m], present))
        logits.append(logit_loss(g, teacher_logits[m], student_logits, task, present))
    total = g.add(g.add(ls, g.scale(g.add_n(feats), weights.alpha)), g.scale(g.add_n(logits), weights.beta))
    return LossBreakdown(ls.item(), [f.item() for f in feats], [l.item() for l in logits], total.item(),
                         weights, total)
